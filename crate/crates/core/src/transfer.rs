//! Moving voxel material fields onto query points, merging near-equal materials, and
//! pointwise elasticity: Lamé parameters, corotational and Neo-Hookean energy and Kirchhoff
//! stress, and deformed splat covariances.

use std::io::{Read, Write};
use std::path::Path;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Matrix3;

use crate::error::{invalid, numeric, Result};
use crate::mtd::MaterialTriplet;
use crate::vec3::Vec3;
use crate::voxelizer::{GaussianSplat, SolidVoxelization};

pub type Mat3 = [[f64; 3]; 3];

/// Default merge tolerances: 10 Pa, 1e-3, 10 kg/m³.
pub const MERGE_TOL: [f64; 3] = [10.0, 1e-3, 10.0];

/// A voxelization with one material per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialField {
    pub voxels: SolidVoxelization,
    pub materials: Vec<MaterialTriplet>,
}

impl MaterialField {
    pub fn new(voxels: SolidVoxelization, materials: Vec<MaterialTriplet>) -> Result<Self> {
        if voxels.len() != materials.len() {
            return Err(invalid(format!("{} voxels but {} materials", voxels.len(), materials.len())));
        }
        for (i, m) in materials.iter().enumerate() {
            m.validate().map_err(|e| invalid(format!("voxel {i}: {e}")))?;
        }
        Ok(Self { voxels, materials })
    }

    pub fn len(&self) -> usize {
        self.materials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.materials.is_empty()
    }

    pub fn load(voxf: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<Self> {
        let voxels = SolidVoxelization::load(voxf)?;
        let materials = read_material_sidecar(std::fs::File::open(sidecar)?, voxels.len())?;
        Self::new(voxels, materials)
    }

    pub fn save(&self, voxf: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<()> {
        self.voxels.save(voxf)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(sidecar)?);
        write_material_sidecar(&mut w, &self.materials)?;
        w.flush()?;
        Ok(())
    }
}

/// CSV `voxel_index,e_pa,nu,rho_kgm3`; rows may come in any order but must cover every voxel once.
pub fn read_material_sidecar<R: Read>(r: R, count: usize) -> Result<Vec<MaterialTriplet>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out: Vec<Option<MaterialTriplet>> = vec![None; count];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| invalid(format!("material CSV row {}: {what}", line + 1));
        if rec.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|_| bad("bad number"));
        let idx: usize = rec[0].trim().parse().map_err(|_| bad("bad voxel index"))?;
        let t = MaterialTriplet::new(num(1)?, num(2)?, num(3)?).map_err(|e| bad(&e.to_string()))?;
        let slot = out.get_mut(idx).ok_or_else(|| bad("voxel index out of range"))?;
        if slot.replace(t).is_some() {
            return Err(bad("duplicate voxel index"));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| invalid(format!("material CSV has no row for voxel {i}"))))
        .collect()
}

/// Reads a material CSV whose voxel count is its row count.
pub fn load_material_sidecar(path: impl AsRef<Path>) -> Result<Vec<MaterialTriplet>> {
    let text = std::fs::read_to_string(path)?;
    let rows = csv::Reader::from_reader(text.as_bytes()).records().count();
    read_material_sidecar(text.as_bytes(), rows)
}

pub fn write_material_sidecar<W: Write>(w: W, materials: &[MaterialTriplet]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["voxel_index", "e_pa", "nu", "rho_kgm3"])?;
    for (i, t) in materials.iter().enumerate() {
        out.write_record([i.to_string(), t.e.to_string(), t.nu.to_string(), t.rho.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Index of the closest center for every query; ties go to the lowest index.
pub fn nearest_indices(centers: &[Vec3], queries: &[Vec3]) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(invalid("nearest-neighbour lookup needs at least one voxel"));
    }
    let tree: ImmutableKdTree<f64, 3> =
        ImmutableKdTree::new_from_slice(centers).map_err(|e| invalid(format!("cannot index voxel centers: {e:?}")))?;
    let d2 = |a: &Vec3, b: &Vec3| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
    Ok(queries
        .iter()
        .map(|q| {
            let best = tree.query(q).nearest_one::<SquaredEuclidean<f64>>().execute();
            // Re-rank everything within rounding of the best distance to apply the tie rule.
            let radius = best.distance * (1.0 + 1e-9) + 1e-300;
            tree.query(q)
                .within::<SquaredEuclidean<f64>>(radius)
                .execute()
                .into_iter()
                .map(|n| n.item as usize)
                .chain(std::iter::once(best.item as usize))
                .min_by(|&a, &b| d2(&centers[a], q).total_cmp(&d2(&centers[b], q)).then(a.cmp(&b)))
                .expect("at least the nearest item")
        })
        .collect())
}

pub fn nearest_material(field: &MaterialField, queries: &[Vec3]) -> Result<Vec<MaterialTriplet>> {
    Ok(nearest_indices(&field.voxels.centers, queries)?.into_iter().map(|i| field.materials[i]).collect())
}

/// Single-linkage clustering of one property at `tol` (gaps strictly below `tol` join);
/// each member takes the value of the cluster's earliest element.
pub fn merge_values(values: &[f64], tol: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = values.to_vec();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] - values[order[end - 1]] < tol {
            end += 1;
        }
        let first = *order[start..end].iter().min().expect("non-empty cluster");
        for &i in &order[start..end] {
            out[i] = values[first];
        }
        start = end;
    }
    out
}

/// Merges each property independently with tolerances `(E, ν, ρ)`.
pub fn merge_tolerances(field: &MaterialField, tol: [f64; 3]) -> MaterialField {
    let column = |f: fn(&MaterialTriplet) -> f64, t: f64| merge_values(&field.materials.iter().map(f).collect::<Vec<_>>(), t);
    let e = column(|m| m.e, tol[0]);
    let nu = column(|m| m.nu, tol[1]);
    let rho = column(|m| m.rho, tol[2]);
    let materials = (0..field.len()).map(|i| MaterialTriplet { e: e[i], nu: nu[i], rho: rho[i] }).collect();
    MaterialField { voxels: field.voxels.clone(), materials }
}

/// `(λ, μ)` from Young's modulus and Poisson's ratio.
pub fn lame(e: f64, nu: f64) -> Result<(f64, f64)> {
    if !(e > 0.0) {
        return Err(invalid(format!("Young's modulus must be positive, got {e}")));
    }
    if !(nu < 0.5) || !nu.is_finite() {
        return Err(numeric(format!("Lamé λ is singular for ν = {nu}")));
    }
    Ok((e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu))))
}

fn to_na(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn from_na(m: &Matrix3<f64>) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn checked(f: &Mat3) -> Result<(Matrix3<f64>, f64)> {
    if f.iter().flatten().any(|v| !v.is_finite()) {
        return Err(numeric("deformation gradient has non-finite entries"));
    }
    let m = to_na(f);
    let j = m.determinant();
    if !(j > 0.0) {
        return Err(numeric(format!("deformation gradient must have positive determinant, got {j}")));
    }
    Ok((m, j))
}

/// Symmetric stretch `S` of the polar decomposition `F = R S`.
pub fn polar_stretch(f: &Mat3) -> Result<Mat3> {
    let (m, _) = checked(f)?;
    let svd = m.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| numeric("SVD failed"))?;
    let s = v_t.transpose() * Matrix3::from_diagonal(&svd.singular_values) * v_t;
    Ok(from_na(&s))
}

/// Energy density and stress `2μ ε + λ tr(ε) I` with `ε = S − I`.
pub fn corotational(f: &Mat3, lambda: f64, mu: f64) -> Result<(f64, Mat3)> {
    let s = to_na(&polar_stretch(f)?);
    Ok(corotational_from_stretch(&s, lambda, mu))
}

fn corotational_from_stretch(s: &Matrix3<f64>, lambda: f64, mu: f64) -> (f64, Mat3) {
    let eps = s - Matrix3::identity();
    let tr = eps.trace();
    let w = mu * eps.component_mul(&eps).sum() + 0.5 * lambda * tr * tr;
    let tau = eps * (2.0 * mu) + Matrix3::identity() * (lambda * tr);
    (w, from_na(&tau))
}

/// Corotational energy and stress as a function of the stretch directly.
pub fn corotational_stretch(s: &Mat3, lambda: f64, mu: f64) -> (f64, Mat3) {
    corotational_from_stretch(&to_na(s), lambda, mu)
}

/// Compressible Neo-Hookean energy and Kirchhoff stress `μ(B − I) + λ ln J I`.
pub fn neo_hookean(f: &Mat3, lambda: f64, mu: f64) -> Result<(f64, Mat3)> {
    let (m, j) = checked(f)?;
    let ln_j = j.ln();
    let c = m.transpose() * m;
    let b = m * m.transpose();
    let w = 0.5 * mu * (c.trace() - 3.0 - 2.0 * ln_j) + 0.5 * lambda * ln_j * ln_j;
    let tau = (b - Matrix3::identity()) * mu + Matrix3::identity() * (lambda * ln_j);
    Ok((w, from_na(&tau)))
}

/// `(F L)(F L)ᵀ + ε I` with `L = R₀ diag(s₀)`: positive definite even for singular `F`.
pub fn deform_splat_covariance(splat: &GaussianSplat, f: &Mat3, eps: f64) -> Result<Mat3> {
    if !(eps > 0.0) {
        return Err(invalid("covariance padding must be positive"));
    }
    let r = to_na(&splat.rotation_matrix());
    let l = r * Matrix3::from_diagonal(&nalgebra::Vector3::from(splat.scale));
    let fl = to_na(f) * l;
    Ok(from_na(&(fl * fl.transpose() + Matrix3::identity() * eps)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const I: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    #[test]
    fn lame_examples() {
        let (l, m) = lame(2.6, 0.3).unwrap();
        assert!((l - 1.5).abs() < 1e-15 && (m - 1.0).abs() < 1e-15);
        assert_eq!(lame(4.0, 0.0).unwrap(), (0.0, 2.0));
        assert!(lame(1.0, 0.5).is_err());
    }

    #[test]
    fn energies_at_rest_and_rotation() {
        let c = 0.6f64.cos();
        let s = 0.6f64.sin();
        let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        for f in [I, rot] {
            let (w, tau) = corotational(&f, 1.5, 1.0).unwrap();
            assert!(w.abs() < 1e-24);
            assert!(tau.iter().flatten().all(|v| v.abs() < 1e-12));
            let (w, tau) = neo_hookean(&f, 1.5, 1.0).unwrap();
            assert!(w.abs() < 1e-15);
            assert!(tau.iter().flatten().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn energy_examples() {
        let (w, _) = corotational(&[[1.01, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1.5, 1.0).unwrap();
        assert!((w - 1.75e-4).abs() < 1e-15);
        let (w, _) = neo_hookean(&[[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1.0, 1.0).unwrap();
        let exact = 0.5 * (6.0 - 3.0 - 2.0 * 2f64.ln()) + 0.5 * 2f64.ln().powi(2);
        assert!((w - exact).abs() < 1e-15);
        assert!((w - 1.047080).abs() < 1e-6);
        assert!(neo_hookean(&[[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1.0, 1.0).is_err());
    }

    #[test]
    fn merge_examples() {
        assert_eq!(merge_values(&[1000.0, 1005.0], 10.0), vec![1000.0, 1000.0]);
        assert_eq!(merge_values(&[1000.0, 1020.0], 10.0), vec![1000.0, 1020.0]);
        assert_eq!(merge_values(&[1016.0, 1000.0, 1008.0], 10.0), vec![1016.0, 1016.0, 1016.0]);
        assert_eq!(merge_values(&[1000.0, 1008.0, 1016.0], 10.0), vec![1000.0; 3]);
    }

    #[test]
    fn nearest_tie_goes_to_lower_index() {
        let centers: Vec<Vec3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut c: Vec<Vec3> = (0..10).map(|i| [i as f64 + 5.0, 5.0, 0.0]).collect();
        c[3] = [0.0, 1.0, 0.0];
        c[7] = [0.0, -1.0, 0.0];
        assert_eq!(nearest_indices(&c, &[[0.0, 0.0, 0.0]]).unwrap(), vec![3]);
        assert_eq!(nearest_indices(&centers, &[[3.5, 0.0, 0.0]]).unwrap(), vec![3]);
        assert_eq!(nearest_indices(&centers, &[[4.0, 0.0, 0.0]]).unwrap(), vec![4]);
    }

    #[test]
    fn collapsed_splat_stays_positive_definite() {
        let s = GaussianSplat::isotropic([0.0; 3], 0.2);
        let sigma = deform_splat_covariance(&s, &[[0.0; 3]; 3], 1e-9).unwrap();
        assert_eq!(sigma, [[1e-9, 0.0, 0.0], [0.0, 1e-9, 0.0], [0.0, 0.0, 1e-9]]);
        let sigma = deform_splat_covariance(&s, &I, 1e-300).unwrap();
        for (i, row) in sigma.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((v - if i == j { 0.04 } else { 0.0 }).abs() < 1e-15);
            }
        }
    }
}
