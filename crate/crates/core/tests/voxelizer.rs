use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxmat::shapes::{self, TriMesh};
use voxmat::voxelizer::*;
use voxmat_oracles::geometry::{point_in_box, solid_cells, triangle_box_overlap_clip, triangle_samples};
use voxmat_oracles::stats::chi_squared_quantile;

/// Interior flags predicted by the winding-number and clipping oracles on the grid's lattice.
fn oracle_interior(mesh: &TriMesh, grid: &VoxelGrid) -> Vec<bool> {
    solid_cells(&mesh.vertices, &mesh.triangles, grid.origin, grid.dims, grid.pitch)
}

fn check_against_oracle(name: &str, mesh: &TriMesh, r: u32) -> (Vec<[f64; 3]>, VoxelGrid) {
    let (centers, grid) = voxelize_solid(&mesh.vertices, &mesh.triangles, r).unwrap();
    let h = 1.0 / r as f64;
    for a in 0..3 {
        let lo = mesh.vertices.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
        let hi = mesh.vertices.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(grid.origin[a], lo - h);
        assert!(grid.origin[a] + grid.dims[a] as f64 * h >= hi + h - 1e-12);
    }
    let expected = oracle_interior(mesh, &grid);
    let diff = (0..grid.len()).filter(|&i| expected[i] != grid.interior[i]).count();
    assert_eq!(diff, 0, "{name}: {diff} cells disagree with the oracle");
    assert!(VoxelGrid::count(&grid.interior) > 0, "{name}: empty interior");
    for i in 0..grid.len() {
        assert!(!(grid.interior[i] && (grid.exterior[i] || grid.surface[i])));
        assert_eq!(grid.interior[i], !grid.exterior[i] && !grid.surface[i]);
    }
    assert_eq!(centers.len(), VoxelGrid::count(&grid.interior));
    (centers, grid)
}

#[test]
fn cube_matches_winding_number_oracle() {
    let (centers, _) = check_against_oracle("cube", &shapes::cube([0.0; 3], 0.25), 16);
    // Faces sit on cell boundaries, so cells on both sides are surface: 6 interior cells per axis.
    assert_eq!(centers.len(), 216);
}

#[test]
fn watertight_shapes_match_oracle() {
    // Axis-aligned faces of the bounding box sit exactly on cell boundaries, so the box-shaped
    // meshes use dyadic coordinates to keep both sides of the comparison free of rounding.
    let two = shapes::cube([-0.25, 0.0, 0.0], 0.15625).merged(&shapes::cube([0.25, 0.0625, 0.0], 0.125));
    let cases = [
        ("icosphere", shapes::icosphere([0.01, -0.02, 0.03], 0.25, 3), 32),
        ("torus", shapes::torus(0.3, 0.12, 48, 24), 32),
        ("two cubes", two, 32),
        ("l-bracket", shapes::l_bracket(0.1875, 0.25, [-0.1875, -0.1875, -0.125]), 32),
    ];
    for (name, mesh, r) in cases {
        check_against_oracle(name, &mesh, r);
    }
}

#[test]
fn icosphere_volume_close_to_ball() {
    let r = 32;
    let (_, grid) = voxelize_solid(&shapes::icosphere([0.0; 3], 0.25, 3).vertices, &shapes::icosphere([0.0; 3], 0.25, 3).triangles, r).unwrap();
    let h3 = (1.0 / r as f64).powi(3);
    let est = (VoxelGrid::count(&grid.interior) as f64 + VoxelGrid::count(&grid.surface) as f64 / 2.0) * h3;
    let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.25f64.powi(3);
    assert!((est - exact).abs() / exact <= 0.1, "{est} vs {exact}");
}

#[test]
fn open_sheet_has_surface_but_no_interior() {
    let sheet = shapes::quad_sheet(0.3);
    let (centers, grid) = voxelize_solid(&sheet.vertices, &sheet.triangles, 16).unwrap();
    assert!(centers.is_empty());
    assert!(VoxelGrid::count(&grid.surface) > 0);
}

fn segmented(meshes: &[(&str, TriMesh)]) -> SegmentedMesh {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut segments = Vec::new();
    for (id, m) in meshes {
        let off = vertices.len();
        vertices.extend_from_slice(&m.vertices);
        let first = faces.len();
        faces.extend(m.triangles.iter().map(|t| t.iter().map(|i| i + off).collect::<Vec<_>>()));
        segments.push(Segment { id: id.to_string(), faces: (first..faces.len()).collect() });
    }
    SegmentedMesh::new(vertices, faces, segments).unwrap()
}

#[test]
fn single_segment_reduces_to_solid_voxelization() {
    let mesh = segmented(&[("body", shapes::cube([3.0, -1.0, 2.0], 0.7))]);
    let vox = voxelize_segmented(&mesh, 16, None, None, 0).unwrap();
    let norm = mesh.normalized().unwrap();
    let tris = fan_triangulate(&norm.faces);
    let (centers, _) = voxelize_solid(&norm.vertices, &tris, 16).unwrap();
    assert_eq!(vox.centers, centers);
    assert!(vox.segments.iter().all(|s| *s == Some(0)));
    vox.validate().unwrap();
    for d in vox.discretized() {
        assert_eq!(discretize(d, 16), d);
    }
}

#[test]
fn quads_are_fan_triangulated() {
    let cube = shapes::cube([0.0; 3], 1.0);
    let quads: Vec<Vec<usize>> = cube.triangles.chunks(2).map(|p| vec![p[0][0], p[0][1], p[0][2], p[1][2]]).collect();
    let mesh = SegmentedMesh::single("q", cube.vertices.clone(), quads).unwrap();
    let tri_mesh = SegmentedMesh::single("t", cube.vertices.clone(), cube.faces()).unwrap();
    assert_eq!(voxelize_segmented(&mesh, 12, None, None, 1).unwrap().centers, voxelize_segmented(&tri_mesh, 12, None, None, 1).unwrap().centers);
}

#[test]
fn per_segment_cap() {
    let mesh = segmented(&[("big", shapes::cube([0.0; 3], 1.0))]);
    let full = voxelize_segmented(&mesh, 16, None, None, 3).unwrap();
    assert!(full.len() >= 500);
    let a = voxelize_segmented(&mesh, 16, Some(10), None, 3).unwrap();
    let b = voxelize_segmented(&mesh, 16, Some(10), None, 3).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    let all: HashSet<_> = full.centers.iter().map(|c| c.map(f64::to_bits)).collect();
    assert!(a.centers.iter().all(|c| all.contains(&c.map(f64::to_bits))));
    let global = voxelize_segmented(&mesh, 16, None, Some(7), 3).unwrap();
    assert_eq!(global.len(), 7);
}

#[test]
fn two_cubes_keep_their_labels() {
    let mesh = segmented(&[("left", shapes::cube([-2.0, 0.0, 0.0], 0.8)), ("right", shapes::cube([2.0, 0.3, 0.0], 0.6))]);
    let vox = voxelize_segmented(&mesh, 24, None, None, 0).unwrap();
    assert!(vox.len() > 0);
    let mut seen = HashSet::new();
    for (i, c) in vox.centers.iter().enumerate() {
        let want = if c[0] < 0.0 { "left" } else { "right" };
        assert_eq!(vox.segment_of(i), Some(want));
        seen.insert(want);
    }
    assert_eq!(seen.len(), 2);
}

#[test]
fn segmented_output_round_trips_through_voxf() {
    let mesh = segmented(&[("a", shapes::icosphere([0.0; 3], 1.0, 2)), ("b", shapes::cube([2.5, 0.0, 0.0], 0.5))]);
    let vox = voxelize_segmented(&mesh, 20, Some(200), Some(300), 9).unwrap();
    let mut buf = Vec::new();
    vox.write_to(&mut buf).unwrap();
    let back = SolidVoxelization::read_from(buf.as_slice()).unwrap();
    assert_eq!(back.lattice, vox.lattice);
    assert_eq!(back.segments, vox.segments);
    assert_eq!(back.labels, vox.labels);
}

fn random_triangle(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let s = rng.random_range(0.05..1.5);
    std::array::from_fn(|_| std::array::from_fn(|a| c[a] + s * rng.random_range(-1.0..1.0)))
}

#[test]
fn sat_never_misses_sampled_contact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut disagreements_with_clip = 0;
    for _ in 0..100_000 {
        let tri = random_triangle(&mut rng);
        let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let half: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..0.6));
        let sat = triangle_box_intersect(&tri, center, half);
        if !sat {
            assert!(!triangle_samples(&tri, 44).iter().any(|&p| point_in_box(p, center, half)), "{tri:?} {center:?} {half:?}");
        }
        if sat != triangle_box_overlap_clip(&tri, center, half) {
            disagreements_with_clip += 1;
        }
    }
    assert_eq!(disagreements_with_clip, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sat_agrees_with_clipping(
        pts in prop::array::uniform3(prop::array::uniform3(-1.0f64..1.0)),
        center in prop::array::uniform3(-0.5f64..0.5),
        half in prop::array::uniform3(0.01f64..0.5),
    ) {
        prop_assert_eq!(triangle_box_intersect(&pts, center, half), triangle_box_overlap_clip(&pts, center, half));
    }

    #[test]
    fn discretization_idempotent(c in prop::array::uniform3(-0.4999999f64..0.4999999), r in 1u32..80) {
        let d = discretize(c, r);
        prop_assert_eq!(discretize(d, r), d);
        for a in 0..3 {
            prop_assert!(d[a] <= c[a] && c[a] - d[a] < 1.0 / r as f64 + 1e-12);
        }
    }

    #[test]
    fn splat_occupancy_monotone_in_threshold(t1 in 0.5f64..15.0, dt in 0.0f64..5.0, seed in 0u64..1000) {
        let splats = random_splats(seed, 4);
        let small = splat_occupancy_at(&splats, 24, t1).unwrap();
        let large = splat_occupancy_at(&splats, 24, t1 + dt).unwrap();
        prop_assert!(small.cells.iter().zip(&large.cells).all(|(a, b)| !a || *b));
    }

    #[test]
    fn splat_membership_is_rotation_invariant(seed in 0u64..1000, angle in -3.0f64..3.0) {
        let splats = random_splats(seed, 3);
        let q = [(angle / 2.0).cos(), 0.0, (angle / 2.0).sin() * 0.6, (angle / 2.0).sin() * 0.8];
        let rot = GaussianSplat { rotation: q, ..GaussianSplat::isotropic([0.0; 3], 1.0) }.rotation_matrix();
        let apply = |p: [f64; 3]| std::array::from_fn::<f64, 3, _>(|i| (0..3).map(|k| rot[i][k] * p[k]).sum());
        let rotated: Vec<GaussianSplat> = splats.iter().map(|s| GaussianSplat { mean: apply(s.mean), rotation: quat_mul(q, s.rotation), ..*s }).collect();
        let occ = Occupancy::empty(16);
        for idx in 0..occ.cells.len() {
            let u = occ.center_of(idx);
            let a = splats.iter().map(|s| s.mahalanobis2(u)).fold(f64::INFINITY, f64::min);
            let b = rotated.iter().map(|s| s.mahalanobis2(apply(u))).fold(f64::INFINITY, f64::min);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
            if (a - CHI2_3_Q99).abs() > 1e-6 {
                prop_assert_eq!(a <= CHI2_3_Q99, b <= CHI2_3_Q99);
            }
        }
    }
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn random_splats(seed: u64, n: usize) -> Vec<GaussianSplat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            GaussianSplat {
                mean: std::array::from_fn(|_| rng.random_range(-0.25..0.25)),
                rotation: q.map(|v| v / len),
                scale: std::array::from_fn(|_| rng.random_range(0.01..0.06)),
                opacity: 1.0,
            }
        })
        .collect()
}

#[test]
fn chi_square_constant_matches_inverse_cdf() {
    assert!((chi_squared_quantile(3.0, 0.99) - CHI2_3_Q99).abs() < 1e-9);
    assert!((CHI2_3_Q99.sqrt() - 3.3682).abs() < 1e-4);
}

#[test]
fn isotropic_splat_fills_its_ball() {
    let s = 0.1;
    let occ = splat_to_occupancy(&[GaussianSplat::isotropic([0.0; 3], s)], 64).unwrap();
    let vol = occ.count() as f64 / 64f64.powi(3);
    let exact = 4.0 / 3.0 * std::f64::consts::PI * (CHI2_3_Q99.sqrt() * s).powi(3);
    assert!((vol - exact).abs() / exact <= 0.1, "{vol} vs {exact}");
}

fn components(occ: &Occupancy) -> usize {
    let n = occ.r as usize;
    let mut seen = vec![false; occ.cells.len()];
    let mut count = 0;
    for start in 0..occ.cells.len() {
        if !occ.cells[start] || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(idx) = stack.pop() {
            let c = occ.cell(idx);
            for a in 0..3 {
                for d in [-1i64, 1] {
                    let v = c[a] as i64 + d;
                    if v < 0 || v >= n as i64 {
                        continue;
                    }
                    let mut nb = c;
                    nb[a] = v as usize;
                    let ni = occ.index(nb[0], nb[1], nb[2]);
                    if occ.cells[ni] && !seen[ni] {
                        seen[ni] = true;
                        stack.push(ni);
                    }
                }
            }
        }
    }
    count
}

#[test]
fn separated_splats_form_two_components() {
    let splats = [GaussianSplat::isotropic([-0.3, 0.0, 0.0], 0.03), GaussianSplat::isotropic([0.3, 0.1, 0.0], 0.04)];
    assert_eq!(components(&splat_to_occupancy(&splats, 32).unwrap()), 2);
    assert!(splat_to_occupancy(&[], 32).is_err());
    let flat = GaussianSplat { scale: [0.1, 1e-12, 0.1], ..GaussianSplat::isotropic([0.0; 3], 0.1) };
    assert!(splat_to_occupancy(&[flat], 32).is_err());
}

#[test]
fn carving_a_convex_ball() {
    let occ = splat_to_occupancy(&[GaussianSplat::isotropic([0.0; 3], 0.1)], 32).unwrap();
    let views = voxmat::featlift::orbit_cameras(DEFAULT_VIEWS, CARVE_RADIUS, CARVE_FOV_DEG, 128, 128).unwrap();
    let carved = carve_exterior(&occ, &views);
    assert_eq!(carved, occ);
}

#[test]
fn hollow_shell_keeps_its_interior() {
    let mut splats = Vec::new();
    for d in voxmat::featlift::fibonacci_sphere(600) {
        splats.push(GaussianSplat::isotropic(d.map(|v| v * 0.3), 0.025));
    }
    let r = 32;
    let occ = splat_to_occupancy(&splats, r).unwrap();
    let views = voxmat::featlift::orbit_cameras(DEFAULT_VIEWS, CARVE_RADIUS, CARVE_FOV_DEG, 128, 128).unwrap();
    let carved = carve_exterior(&occ, &views);
    let mut hollow = 0;
    for idx in 0..occ.cells.len() {
        let c = occ.center_of(idx);
        let rad = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        if occ.cells[idx] {
            assert!(carved.cells[idx]);
        } else if rad < 0.2 {
            hollow += 1;
            assert!(carved.cells[idx], "interior cell {c:?} was carved");
        } else if rad > 0.45 {
            assert!(!carved.cells[idx], "exterior cell {c:?} survived");
        }
    }
    assert!(hollow > 100);
}

#[test]
fn voxelize_splats_on_a_single_splat() {
    let splat = GaussianSplat::isotropic([1.0, 2.0, 3.0], 0.5);
    let vox = voxelize_splats(&[splat], 24, DEFAULT_VIEWS).unwrap();
    let occ = splat_to_occupancy(&normalize_splats(&[splat]).unwrap(), 24).unwrap();
    assert_eq!(vox.centers, occ.centers());
    assert_eq!(vox, voxelize_splats(&[splat], 24, DEFAULT_VIEWS).unwrap());
    assert!(vox.segments.iter().all(Option::is_none));
}

#[test]
fn splat_csv_parses() {
    let csv = "mx,my,mz,qw,qx,qy,qz,sx,sy,sz,opacity\n0,0,0,1,0,0,0,0.1,0.2,0.3,0.9\n";
    let s = read_splats_csv(csv.as_bytes()).unwrap();
    assert_eq!(s[0].scale, [0.1, 0.2, 0.3]);
    assert!(read_splats_csv("mx,my,mz,qw,qx,qy,qz,sx,sy,sz,opacity\n0,0,0,2,0,0,0,1,1,1,1\n".as_bytes()).is_err());
}
