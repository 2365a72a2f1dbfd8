//! Solid voxelization of segmented triangle meshes and of Gaussian splat sets.
//!
//! Meshes go through surface rasterization (separating-axis triangle/box test), a 6-connected
//! flood fill of the exterior from the grid boundary, and `interior = ¬exterior ∧ ¬surface`.
//! Splats are rasterized as solid 99% ellipsoids and then carved from the outside by rays cast
//! from cameras spread over a sphere, which keeps unseen interior cells.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::featlift::{orbit_cameras, CameraView};
use crate::vec3::{cross, dot, norm, scale, sub, Vec3};

/// χ²₃ quantile at 0.99: squared Mahalanobis radius of the 99% ellipsoid.
pub const CHI2_3_Q99: f64 = 11.344866730144373;
/// Vertices are clipped this far inside the unit cube after normalization.
pub const CLIP_EPS: f64 = 1e-6;
/// Camera placement for splat carving.
pub const CARVE_RADIUS: f64 = 2.0;
pub const CARVE_FOV_DEG: f64 = 40.0;
pub const DEFAULT_VIEWS: usize = 64;
const MIN_SPLAT_SCALE: f64 = 1e-9;

/// Closed triangle vs closed axis-aligned box, separating-axis test over 13 axes.
pub fn triangle_box_intersect(tri: &[Vec3; 3], center: Vec3, half: Vec3) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];
    let separated = |axis: Vec3| {
        let p = [dot(v[0], axis), dot(v[1], axis), dot(v[2], axis)];
        let r = half[0] * axis[0].abs() + half[1] * axis[1].abs() + half[2] * axis[2].abs();
        p[0].min(p[1]).min(p[2]) > r || p[0].max(p[1]).max(p[2]) < -r
    };
    for a in 0..3 {
        let mut axis = [0.0; 3];
        axis[a] = 1.0;
        if separated(axis) {
            return false;
        }
    }
    let e = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];
    if separated(cross(e[0], e[1])) {
        return false;
    }
    for edge in e {
        for a in 0..3 {
            let mut unit = [0.0; 3];
            unit[a] = 1.0;
            if separated(cross(edge, unit)) {
                return false;
            }
        }
    }
    true
}

/// Surface, exterior and interior flags over a padded lattice with pitch `1/r`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub r: u32,
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub pitch: f64,
    pub surface: Vec<bool>,
    pub exterior: Vec<bool>,
    pub interior: Vec<bool>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn cell(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        [idx / (self.dims[1] * self.dims[2]), j, k]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.pitch;
        [
            self.origin[0] + (i as f64 + 0.5) * h,
            self.origin[1] + (j as f64 + 0.5) * h,
            self.origin[2] + (k as f64 + 0.5) * h,
        ]
    }

    pub fn count(flags: &[bool]) -> usize {
        flags.iter().filter(|&&b| b).count()
    }
}

/// Solid voxelization of a triangle soup at pitch `1/r`. Returns the centers of interior cells
/// (lattice order) together with the full grid.
pub fn voxelize_solid(vertices: &[Vec3], triangles: &[[usize; 3]], r: u32) -> Result<(Vec<Vec3>, VoxelGrid)> {
    if triangles.is_empty() {
        return Err(invalid("mesh has no faces"));
    }
    if r == 0 {
        return Err(invalid("resolution must be positive"));
    }
    if vertices.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("mesh has non-finite vertices"));
    }
    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
        return Err(invalid(format!("face {t:?} references a missing vertex")));
    }
    let h = 1.0 / r as f64;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for t in triangles {
        for &vi in t {
            for a in 0..3 {
                lo[a] = lo[a].min(vertices[vi][a]);
                hi[a] = hi[a].max(vertices[vi][a]);
            }
        }
    }
    let origin = [lo[0] - h, lo[1] - h, lo[2] - h];
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = (((hi[a] + h) - origin[a]) / h).ceil().max(1.0) as usize;
    }
    let total = dims[0] * dims[1] * dims[2];
    let mut grid = VoxelGrid {
        r,
        dims,
        origin,
        pitch: h,
        surface: vec![false; total],
        exterior: vec![false; total],
        interior: vec![false; total],
    };

    let half = [h / 2.0; 3];
    let to_index = |x: f64, a: usize| ((x - origin[a]) / h).floor();
    for t in triangles {
        let tri = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
        let mut range = [(0usize, 0usize); 3];
        for (a, ra) in range.iter_mut().enumerate() {
            let tmin = tri[0][a].min(tri[1][a]).min(tri[2][a]);
            let tmax = tri[0][a].max(tri[1][a]).max(tri[2][a]);
            // One cell of slack on each side; the SAT test decides.
            let i0 = (to_index(tmin, a) - 1.0).max(0.0) as usize;
            let i1 = ((to_index(tmax, a) + 1.0).max(0.0) as usize).min(dims[a] - 1);
            *ra = (i0, i1);
        }
        for i in range[0].0..=range[0].1 {
            for j in range[1].0..=range[1].1 {
                for k in range[2].0..=range[2].1 {
                    let idx = grid.index(i, j, k);
                    if !grid.surface[idx] && triangle_box_intersect(&tri, grid.center(i, j, k), half) {
                        grid.surface[idx] = true;
                    }
                }
            }
        }
    }

    let mut queue = VecDeque::new();
    for idx in 0..total {
        let c = grid.cell(idx);
        let boundary = (0..3).any(|a| c[a] == 0 || c[a] == dims[a] - 1);
        if boundary && !grid.surface[idx] {
            grid.exterior[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        let c = grid.cell(idx);
        for a in 0..3 {
            for up in [false, true] {
                let mut n = c;
                if up {
                    if c[a] + 1 >= dims[a] {
                        continue;
                    }
                    n[a] += 1;
                } else {
                    if c[a] == 0 {
                        continue;
                    }
                    n[a] -= 1;
                }
                let ni = grid.index(n[0], n[1], n[2]);
                if !grid.surface[ni] && !grid.exterior[ni] {
                    grid.exterior[ni] = true;
                    queue.push_back(ni);
                }
            }
        }
    }

    let mut centers = Vec::new();
    for idx in 0..total {
        let inside = !grid.exterior[idx] && !grid.surface[idx];
        grid.interior[idx] = inside;
        if inside {
            let c = grid.cell(idx);
            centers.push(grid.center(c[0], c[1], c[2]));
        }
    }
    if centers.is_empty() {
        log::warn!("solid voxelization produced no interior cells; the mesh is probably not watertight");
    }
    Ok((centers, grid))
}

/// Largest lattice index `j` with `j/r − 0.5 ≤ x`, clamped to `[0, r−1]`.
fn lattice_index(x: f64, r: u32) -> u32 {
    let rf = r as f64;
    let corner = |j: u32| j as f64 / rf - 0.5;
    let mut j = ((x + 0.5) * rf).floor().clamp(0.0, (r - 1) as f64) as u32;
    while j + 1 < r && corner(j + 1) <= x {
        j += 1;
    }
    while j > 0 && corner(j) > x {
        j -= 1;
    }
    j
}

/// Lattice indices of a point on the `r³` grid spanning `[−0.5, 0.5]³`.
pub fn discretize_index(c: Vec3, r: u32) -> [u32; 3] {
    [lattice_index(c[0], r), lattice_index(c[1], r), lattice_index(c[2], r)]
}

/// Snaps a point to the lower corner of its lattice cell; applying it twice changes nothing.
pub fn discretize(c: Vec3, r: u32) -> Vec3 {
    discretize_index(c, r).map(|j| j as f64 / r as f64 - 0.5)
}

/// Voxel centers in `[−0.5, 0.5]³` with optional segment labels and their cells on the
/// `r³` lattice.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolidVoxelization {
    pub r: u32,
    pub centers: Vec<Vec3>,
    /// Lattice cell of each center. Computed from the centers on construction; taken verbatim
    /// from the file when loading `VOXF`, whose centers are only single precision.
    pub lattice: Vec<[u32; 3]>,
    /// Distinct segment names; `segments` indexes into this table.
    pub labels: Vec<String>,
    pub segments: Vec<Option<u32>>,
}

impl SolidVoxelization {
    pub fn new(r: u32, centers: Vec<Vec3>, labels: Vec<String>, segments: Vec<Option<u32>>) -> Self {
        let lattice = centers.iter().map(|&c| discretize_index(c, r)).collect();
        Self { r, centers, lattice, labels, segments }
    }

    pub fn unlabeled(r: u32, centers: Vec<Vec3>) -> Self {
        let segments = vec![None; centers.len()];
        Self::new(r, centers, Vec::new(), segments)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn segment_of(&self, i: usize) -> Option<&str> {
        self.segments[i].map(|s| self.labels[s as usize].as_str())
    }

    /// Lower lattice corners `j/r − 0.5` of every voxel.
    pub fn discretized(&self) -> Vec<Vec3> {
        let r = self.r as f64;
        self.lattice.iter().map(|j| j.map(|v| v as f64 / r - 0.5)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.len() != self.centers.len() || self.lattice.len() != self.centers.len() {
            return Err(invalid("segment labels or lattice cells do not align with centers"));
        }
        if self.lattice.iter().flatten().any(|&j| j >= self.r) {
            return Err(invalid("lattice index outside the grid"));
        }
        if let Some(c) = self.centers.iter().find(|c| c.iter().any(|v| !(v.abs() < 0.5))) {
            return Err(invalid(format!("voxel center {c:?} lies outside the open unit cube")));
        }
        if self.segments.iter().flatten().any(|&s| s as usize >= self.labels.len()) {
            return Err(invalid("segment label index out of range"));
        }
        Ok(())
    }

    /// Little-endian `VOXF` v1 stream.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.r > u16::MAX as u32 + 1 {
            return Err(invalid("resolution too large for 16-bit voxel indices"));
        }
        w.write_all(b"VOXF")?;
        for v in [1u32, self.r, self.centers.len() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for ((c, seg), cell) in self.centers.iter().zip(&self.segments).zip(&self.lattice) {
            for &j in cell {
                w.write_all(&(j as u16).to_le_bytes())?;
            }
            for v in c {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            w.write_all(&seg.unwrap_or(u32::MAX).to_le_bytes())?;
        }
        w.write_all(&(self.labels.len() as u32).to_le_bytes())?;
        for s in &self.labels {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |detail: &str| Error::Format { what: "VOXF", detail: detail.into() };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"VOXF" {
            return Err(bad("bad magic"));
        }
        let u32_at = |r: &mut R| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        if u32_at(&mut r)? != 1 {
            return Err(bad("unsupported version"));
        }
        let res = u32_at(&mut r)?;
        let count = u32_at(&mut r)? as usize;
        let mut record = [0u8; 22];
        let mut centers = Vec::with_capacity(count.min(1 << 24));
        let mut segments = Vec::with_capacity(count.min(1 << 24));
        let mut lattice = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            r.read_exact(&mut record)?;
            lattice.push([0, 2, 4].map(|o| u16::from_le_bytes([record[o], record[o + 1]]) as u32));
            let f = |o: usize| f32::from_le_bytes([record[o], record[o + 1], record[o + 2], record[o + 3]]) as f64;
            centers.push([f(6), f(10), f(14)]);
            let s = u32::from_le_bytes([record[18], record[19], record[20], record[21]]);
            segments.push((s != u32::MAX).then_some(s));
        }
        let n_labels = u32_at(&mut r)? as usize;
        let mut labels = Vec::with_capacity(n_labels.min(1 << 16));
        for _ in 0..n_labels {
            let len = u32_at(&mut r)? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)?;
            labels.push(String::from_utf8(bytes).map_err(|_| bad("segment label is not UTF-8"))?);
        }
        let vox = Self { r: res, centers, lattice, labels, segments };
        vox.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(vox)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// One named group of polygon faces.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    /// Indices into `SegmentedMesh::faces`.
    pub faces: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedMesh {
    pub vertices: Vec<Vec3>,
    /// Polygons with at least three distinct vertices.
    pub faces: Vec<Vec<usize>>,
    pub segments: Vec<Segment>,
}

impl SegmentedMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<Vec<usize>>, segments: Vec<Segment>) -> Result<Self> {
        let m = Self { vertices, faces, segments };
        m.validate()?;
        Ok(m)
    }

    /// One segment holding every face.
    pub fn single(id: &str, vertices: Vec<Vec3>, faces: Vec<Vec<usize>>) -> Result<Self> {
        let segments = vec![Segment { id: id.into(), faces: (0..faces.len()).collect() }];
        Self::new(vertices, faces, segments)
    }

    pub fn validate(&self) -> Result<()> {
        for (fi, f) in self.faces.iter().enumerate() {
            if let Some(&v) = f.iter().find(|&&v| v >= self.vertices.len()) {
                return Err(invalid(format!("face {fi} references missing vertex {v}")));
            }
            let mut distinct = f.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 3 {
                return Err(invalid(format!("face {fi} has fewer than 3 distinct vertices")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.segments {
            if !seen.insert(s.id.as_str()) {
                return Err(invalid(format!("duplicate segment id '{}'", s.id)));
            }
            if let Some(&f) = s.faces.iter().find(|&&f| f >= self.faces.len()) {
                return Err(invalid(format!("segment '{}' references missing face {f}", s.id)));
            }
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("mesh has non-finite vertices"));
        }
        Ok(())
    }

    /// Reads the `v` / `f` / `g` subset of Wavefront OBJ. Faces before any `g` line belong to
    /// a segment named `default`; repeated group names extend the same segment.
    pub fn read_obj<R: BufRead>(reader: R) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut current = "default".to_string();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            let err = |msg: &str| invalid(format!("OBJ line {}: {msg}", line_no + 1));
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let xyz: Vec<f64> = parts.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| err("bad vertex"))?;
                    if xyz.len() != 3 {
                        return Err(err("vertex needs three coordinates"));
                    }
                    vertices.push([xyz[0], xyz[1], xyz[2]]);
                }
                Some("f") => {
                    let mut face = Vec::new();
                    for tok in parts {
                        let first = tok.split('/').next().unwrap_or_default();
                        let i: i64 = first.parse().map_err(|_| err("bad face index"))?;
                        let resolved = match i {
                            i if i > 0 => i - 1,
                            i if i < 0 => vertices.len() as i64 + i,
                            _ => return Err(err("face index 0")),
                        };
                        if resolved < 0 {
                            return Err(err("face index out of range"));
                        }
                        face.push(resolved as usize);
                    }
                    if !groups.contains_key(&current) {
                        order.push(current.clone());
                    }
                    groups.entry(current.clone()).or_default().push(faces.len());
                    faces.push(face);
                }
                Some("g") => {
                    let name = parts.collect::<Vec<_>>().join(" ");
                    current = if name.is_empty() { "default".into() } else { name };
                }
                _ => {}
            }
        }
        let segments = order.into_iter().map(|id| Segment { faces: groups.remove(&id).unwrap_or_default(), id }).collect();
        Self::new(vertices, faces, segments)
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_obj(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Centers the full-mesh bounding box at the origin, scales its longest side to 1 and clips
    /// to `±(0.5 − CLIP_EPS)`.
    pub fn normalized(&self) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let s = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if !(s > 0.0) {
            return Err(invalid("zero scale"));
        }
        let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
        let lim = 0.5 - CLIP_EPS;
        let vertices = self.vertices.iter().map(|&v| scale(sub(v, c), 1.0 / s).map(|x| x.clamp(-lim, lim))).collect();
        Ok(Self { vertices, faces: self.faces.clone(), segments: self.segments.clone() })
    }
}

/// Fan triangulation of each polygon.
pub fn fan_triangulate<'a>(faces: impl IntoIterator<Item = &'a Vec<usize>>) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for f in faces {
        for w in 1..f.len() - 1 {
            out.push([f[0], f[w], f[w + 1]]);
        }
    }
    out
}

fn subsample<T: Clone>(items: &[T], cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cap {
        Some(k) if k < items.len() => {
            let mut idx = sample(rng, items.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..items.len()).collect(),
    }
}

/// Per-segment solid voxelization in the normalized frame with optional per-segment and
/// global caps (uniform without replacement, survivors keep their order).
pub fn voxelize_segmented(
    mesh: &SegmentedMesh,
    r: u32,
    k_seg: Option<usize>,
    k_all: Option<usize>,
    seed: u64,
) -> Result<SolidVoxelization> {
    mesh.validate()?;
    if mesh.faces.is_empty() {
        return Err(invalid("mesh has no faces"));
    }
    let norm = mesh.normalized()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::new();
    let mut segments = Vec::new();
    let mut labels = Vec::new();
    for seg in &norm.segments {
        let label = labels.len() as u32;
        labels.push(seg.id.clone());
        if seg.faces.is_empty() {
            continue;
        }
        let tris = fan_triangulate(seg.faces.iter().map(|&f| &norm.faces[f]));
        let (solid, _) = voxelize_solid(&norm.vertices, &tris, r)?;
        for i in subsample(&solid, k_seg, &mut rng) {
            centers.push(solid[i]);
            segments.push(Some(label));
        }
    }
    let keep = subsample(&centers, k_all, &mut rng);
    let centers = keep.iter().map(|&i| centers[i]).collect();
    let segments = keep.iter().map(|&i| segments[i]).collect();
    Ok(SolidVoxelization::new(r, centers, labels, segments))
}

/// Gaussian splat: mean, unit quaternion `(w, x, y, z)`, per-axis scales and opacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSplat {
    pub mean: Vec3,
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub opacity: f64,
}

impl GaussianSplat {
    pub fn isotropic(mean: Vec3, s: f64) -> Self {
        Self { mean, rotation: [1.0, 0.0, 0.0, 0.0], scale: [s; 3], opacity: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.rotation;
        if ((q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt() - 1.0).abs() > 1e-6 {
            return Err(invalid("splat quaternion is not unit length"));
        }
        if self.mean.iter().chain(&self.scale).any(|v| !v.is_finite()) {
            return Err(invalid("splat has non-finite values"));
        }
        if self.scale.iter().any(|&s| s < MIN_SPLAT_SCALE) {
            return Err(invalid("splat covariance is not invertible (scale below 1e-9)"));
        }
        Ok(())
    }

    /// Rotation matrix of the quaternion (columns are the local axes).
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.rotation;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> [[f64; 3]; 3] {
        let r = self.rotation_matrix();
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| r[i][k] * r[j][k] * self.scale[k] * self.scale[k]).sum();
            }
        }
        c
    }

    /// Squared Mahalanobis distance of `p` from the mean.
    pub fn mahalanobis2(&self, p: Vec3) -> f64 {
        let r = self.rotation_matrix();
        let d = sub(p, self.mean);
        (0..3)
            .map(|k| {
                let local = r[0][k] * d[0] + r[1][k] * d[1] + r[2][k] * d[2];
                (local / self.scale[k]).powi(2)
            })
            .sum()
    }
}

/// Reads splats from CSV with header `mx,my,mz,qw,qx,qy,qz,sx,sy,sz,opacity`.
pub fn read_splats_csv<R: Read>(r: R) -> Result<Vec<GaussianSplat>> {
    let mut rdr = csv::Reader::from_reader(r);
    let want = ["mx", "my", "mz", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity"];
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = want
        .iter()
        .map(|w| headers.iter().position(|h| h.trim() == *w).ok_or_else(|| invalid(format!("splat CSV is missing column '{w}'"))))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut v = [0.0; 11];
        for (slot, &c) in v.iter_mut().zip(&cols) {
            *slot = rec
                .get(c)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| invalid(format!("splat CSV row {}: bad number in column {}", line + 1, want[c.min(10)])))?;
        }
        let s = GaussianSplat { mean: [v[0], v[1], v[2]], rotation: [v[3], v[4], v[5], v[6]], scale: [v[7], v[8], v[9]], opacity: v[10] };
        s.validate().map_err(|e| invalid(format!("splat CSV row {}: {e}", line + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_splats(path: impl AsRef<Path>) -> Result<Vec<GaussianSplat>> {
    read_splats_csv(std::fs::File::open(path)?)
}

/// Maps splats into `[−0.5, 0.5]³` using the bounding box of every mean padded by three times
/// that splat's largest scale.
pub fn normalize_splats(splats: &[GaussianSplat]) -> Result<Vec<GaussianSplat>> {
    if splats.is_empty() {
        return Err(invalid("no splats"));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in splats {
        s.validate()?;
        let pad = 3.0 * s.scale.iter().copied().fold(0.0, f64::max);
        for a in 0..3 {
            lo[a] = lo[a].min(s.mean[a] - pad);
            hi[a] = hi[a].max(s.mean[a] + pad);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    Ok(splats
        .iter()
        .map(|s| GaussianSplat { mean: scale(sub(s.mean, c), 1.0 / extent), scale: scale(s.scale, 1.0 / extent), ..*s })
        .collect())
}

/// Dense `r³` occupancy over `[−0.5, 0.5]³`, indexed `(i·r + j)·r + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    pub r: u32,
    pub cells: Vec<bool>,
}

impl Occupancy {
    pub fn empty(r: u32) -> Self {
        let n = r as usize;
        Self { r, cells: vec![false; n * n * n] }
    }

    pub fn pitch(&self) -> f64 {
        1.0 / self.r as f64
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.r as usize;
        (i * n + j) * n + k
    }

    pub fn cell(&self, idx: usize) -> [usize; 3] {
        let n = self.r as usize;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    pub fn center_of(&self, idx: usize) -> Vec3 {
        self.cell(idx).map(|i| (i as f64 + 0.5) / self.r as f64 - 0.5)
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        (0..self.cells.len()).filter(|&i| self.cells[i]).map(|i| self.center_of(i)).collect()
    }

    /// Camera-space depth of the first occupied cell entered by the ray `origin + t·dir`
    /// (`dir` unit length) with `t ≤ t_max`, as the ray parameter `t`.
    pub fn first_hit(&self, origin: Vec3, dir: Vec3, t_max: f64) -> Option<f64> {
        let n = self.r as i64;
        let h = self.pitch();
        let mut t_enter = 0.0f64;
        let mut t_exit = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < -0.5 || origin[a] > 0.5 {
                    return None;
                }
            } else {
                let t0 = (-0.5 - origin[a]) / dir[a];
                let t1 = (0.5 - origin[a]) / dir[a];
                t_enter = t_enter.max(t0.min(t1));
                t_exit = t_exit.min(t0.max(t1));
            }
        }
        if t_enter > t_exit || t_enter > t_max {
            return None;
        }
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let p = origin[a] + dir[a] * t_enter;
            cell[a] = (((p + 0.5) / h).floor() as i64).clamp(0, n - 1);
            if dir[a] > 0.0 {
                step[a] = 1;
                t_next[a] = ((cell[a] + 1) as f64 * h - 0.5 - origin[a]) / dir[a];
                t_delta[a] = h / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                t_next[a] = (cell[a] as f64 * h - 0.5 - origin[a]) / dir[a];
                t_delta[a] = -h / dir[a];
            }
        }
        let mut t = t_enter;
        loop {
            if t > t_max {
                return None;
            }
            if self.cells[self.index(cell[0] as usize, cell[1] as usize, cell[2] as usize)] {
                return Some(t);
            }
            let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            t = t_next[a];
            cell[a] += step[a];
            if cell[a] < 0 || cell[a] >= n || t > t_exit {
                return None;
            }
            t_next[a] += t_delta[a];
        }
    }
}

/// Marks every cell whose center lies inside some splat's 99% ellipsoid. Splats must already
/// live in the normalized frame (see [`normalize_splats`]).
pub fn splat_to_occupancy(splats: &[GaussianSplat], r: u32) -> Result<Occupancy> {
    splat_occupancy_at(splats, r, CHI2_3_Q99)
}

/// Same as [`splat_to_occupancy`] with an arbitrary squared Mahalanobis threshold.
pub fn splat_occupancy_at(splats: &[GaussianSplat], r: u32, threshold: f64) -> Result<Occupancy> {
    if splats.is_empty() {
        return Err(invalid("no splats"));
    }
    if r == 0 {
        return Err(invalid("resolution must be positive"));
    }
    let mut occ = Occupancy::empty(r);
    let n = r as i64;
    let rf = r as f64;
    for s in splats {
        s.validate()?;
        let cov = s.covariance();
        let mut range = [(0usize, 0usize); 3];
        let mut skip = false;
        for a in 0..3 {
            let reach = (threshold.max(0.0) * cov[a][a]).sqrt();
            // Cell i has center (i + 0.5)/r − 0.5.
            let i0 = (((s.mean[a] - reach + 0.5) * rf - 0.5).floor() as i64).max(0);
            let i1 = (((s.mean[a] + reach + 0.5) * rf - 0.5).ceil() as i64).min(n - 1);
            if i0 > i1 {
                skip = true;
                break;
            }
            range[a] = (i0 as usize, i1 as usize);
        }
        if skip {
            continue;
        }
        for i in range[0].0..=range[0].1 {
            for j in range[1].0..=range[1].1 {
                for k in range[2].0..=range[2].1 {
                    let idx = occ.index(i, j, k);
                    if !occ.cells[idx] && s.mahalanobis2(occ.center_of(idx)) <= threshold {
                        occ.cells[idx] = true;
                    }
                }
            }
        }
    }
    Ok(occ)
}

/// Front-most occupied depth (camera z) through each pixel center; `∞` where the ray misses.
/// Row-major `height × width`.
pub fn render_depth_map(occ: &Occupancy, view: &CameraView) -> Vec<f64> {
    let (fx, fy, cx, cy) = view.intrinsics();
    let eye = view.center();
    let m = &view.world_to_camera;
    let rows = [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]];
    let mut out = Vec::with_capacity((view.width * view.height) as usize);
    for py in 0..view.height {
        for px in 0..view.width {
            let local = [(px as f64 + 0.5 - cx) / fx, (py as f64 + 0.5 - cy) / fy, 1.0];
            let mut d = [0.0; 3];
            for (k, dk) in d.iter_mut().enumerate() {
                *dk = rows[0][k] * local[0] + rows[1][k] * local[1] + rows[2][k] * local[2];
            }
            let len = norm(d);
            let d = scale(d, 1.0 / len);
            out.push(occ.first_hit(eye, d, f64::INFINITY).map_or(f64::INFINITY, |t| t / len));
        }
    }
    out
}

/// Removes empty cells that some camera sees in open space in front of the occupied surface:
/// an empty cell inside a view's frustum is carved when the first occupied cell along the ray
/// through its center lies deeper than the cell's own depth plus half a cell (or is missing).
/// Occupied cells are never carved. Returns the surviving cells (occupied plus uncarved empty).
pub fn carve_exterior(occ: &Occupancy, views: &[CameraView]) -> Occupancy {
    if views.is_empty() {
        return occ.clone();
    }
    let half = occ.pitch() / 2.0;
    let mut keep = vec![true; occ.cells.len()];
    let setup: Vec<(Vec3, Vec3)> = views
        .iter()
        .map(|v| {
            let m = &v.world_to_camera;
            (v.center(), [m[8], m[9], m[10]])
        })
        .collect();
    for (idx, slot) in keep.iter_mut().enumerate() {
        if occ.cells[idx] {
            continue;
        }
        let p = occ.center_of(idx);
        for (view, &(eye, forward)) in views.iter().zip(&setup) {
            let proj = view.project(p);
            if !proj.in_front || proj.uv[0].abs() > 1.0 || proj.uv[1].abs() > 1.0 {
                continue;
            }
            let ray = sub(p, eye);
            let dist = norm(ray);
            let dir = scale(ray, 1.0 / dist);
            let cos = dot(dir, forward);
            // Any occupied cell entered at camera depth ≤ depth(p) + h/2 shields p.
            let t_max = (proj.depth + half) / cos;
            if occ.first_hit(eye, dir, t_max).is_none() {
                *slot = false;
                break;
            }
        }
    }
    Occupancy { r: occ.r, cells: keep }
}

/// Normalize, rasterize, carve with `n_views` orbit cameras; centers carry no segment ids.
pub fn voxelize_splats(splats: &[GaussianSplat], r: u32, n_views: usize) -> Result<SolidVoxelization> {
    if n_views == 0 {
        return Err(invalid("splat carving needs at least one view"));
    }
    let norm = normalize_splats(splats)?;
    let occ = splat_to_occupancy(&norm, r)?;
    let side = (4 * r).max(64);
    let views = orbit_cameras(n_views, CARVE_RADIUS, CARVE_FOV_DEG, side, side)?;
    let carved = carve_exterior(&occ, &views);
    Ok(SolidVoxelization::unlabeled(r, carved.centers()))
}
