use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxmat::featlift::*;

fn random_map(rng: &mut ChaCha8Rng, n: usize, c: usize) -> FeatureMap {
    FeatureMap::new(n, c, (0..n * n * c).map(|_| rng.random_range(-5.0f32..5.0)).collect()).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect()
}

fn views(rng: &mut ChaCha8Rng, count: usize, c: usize) -> Vec<(CameraView, FeatureMap)> {
    orbit_cameras(count, 2.0, 40.0, 518, 518).unwrap().into_iter().map(|v| (v, random_map(rng, 37, c))).collect()
}

#[test]
fn constant_maps_give_constant_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cams = orbit_cameras(12, 2.0, 40.0, 64, 64).unwrap();
    let value = [0.1f32, -7.25, 3.3];
    let views: Vec<_> = cams.into_iter().map(|v| (v, FeatureMap::constant(5, &value).unwrap())).collect();
    let f = lift_features(&random_points(&mut rng, 500), &views).unwrap();
    for i in 0..f.len() {
        assert!(f.visible[i]);
        assert_eq!(f.row(i), value.map(f64::from));
    }
}

#[test]
fn single_view_is_the_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = views(&mut rng, 1, 4);
    let pts = random_points(&mut rng, 300);
    let f = lift_features(&pts, &v).unwrap();
    for (i, p) in pts.iter().enumerate() {
        assert_eq!(f.row(i), v[0].1.sample(v[0].0.project(*p).uv).as_slice());
    }
}

#[test]
fn view_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut v = views(&mut rng, 9, 3);
    let pts = random_points(&mut rng, 400);
    let base = lift_features(&pts, &v).unwrap();
    for _ in 0..5 {
        for i in (1..v.len()).rev() {
            let j = rng.random_range(0..=i);
            v.swap(i, j);
        }
        assert_eq!(lift_features(&pts, &v).unwrap(), base);
    }
}

#[test]
fn features_stay_within_map_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = views(&mut rng, 6, 2);
    let f = lift_features(&random_points(&mut rng, 1000), &v).unwrap();
    for k in 0..2 {
        let vals = v.iter().flat_map(|(_, m)| m.data().iter().skip(k).step_by(2).map(|&x| x as f64));
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        for i in 0..f.len() {
            assert!(f.row(i)[k] >= lo && f.row(i)[k] <= hi);
        }
    }
}

#[test]
fn feature_csv_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = views(&mut rng, 3, 3);
    let f = lift_features(&random_points(&mut rng, 50), &v).unwrap();
    let mut buf = Vec::new();
    f.write_csv(&mut buf).unwrap();
    assert_eq!(VoxelFeatures::read_csv(buf.as_slice()).unwrap(), f);
}

#[test]
fn camera_json_schema() {
    let v = CameraView::look_at([0.0, 0.0, 2.0], [0.0; 3], [0.0, 1.0, 0.0], 40.0, 64, 48).unwrap();
    let json = serde_json::to_value(vec![v.clone()]).unwrap();
    assert_eq!(json[0]["world_to_camera"].as_array().unwrap().len(), 16);
    assert_eq!(json[0]["fov_y_deg"], 40.0);
    assert_eq!(json[0]["width"], 64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cams.json");
    std::fs::write(&path, json.to_string()).unwrap();
    assert_eq!(load_cameras(&path).unwrap(), vec![v]);
    let mut skew = json.clone();
    skew[0]["world_to_camera"][0] = 2.0.into();
    std::fs::write(&path, skew.to_string()).unwrap();
    assert!(load_cameras(&path).is_err());
}

/// Rows of a rotation from a unit quaternion.
fn rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

proptest! {
    #[test]
    fn projection_is_rigid_motion_equivariant(
        q in prop::array::uniform4(-1.0f64..1.0),
        t in prop::array::uniform3(-3.0f64..3.0),
        eye in prop::array::uniform3(-3.0f64..3.0),
        p in prop::array::uniform3(-0.5f64..0.5),
    ) {
        let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(len > 0.1);
        prop_assume!(eye.iter().map(|v| v * v).sum::<f64>() > 1.0);
        let r = rotation(q.map(|v| v / len));
        let motion = |x: [f64; 3]| std::array::from_fn::<f64, 3, _>(|i| (0..3).map(|k| r[i][k] * x[k]).sum::<f64>() + t[i]);
        let up = [0.3, 0.9, 0.1];
        let cam = CameraView::look_at(eye, [0.0; 3], up, 50.0, 640, 480).unwrap();
        let moved = CameraView::look_at(motion(eye), motion([0.0; 3]), std::array::from_fn(|i| (0..3).map(|k| r[i][k] * up[k]).sum()), 50.0, 640, 480).unwrap();
        let a = cam.project(p);
        let b = moved.project(motion(p));
        prop_assert_eq!(a.in_front, b.in_front);
        prop_assert!((a.uv[0] - b.uv[0]).abs() <= 1e-9 * (1.0 + a.uv[0].abs()));
        prop_assert!((a.uv[1] - b.uv[1]).abs() <= 1e-9 * (1.0 + a.uv[1].abs()));
    }

    #[test]
    fn bilinear_output_bounded_by_neighbours(u in -1.5f64..1.5, v in -1.5f64..1.5, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_map(&mut rng, 4, 1);
        let lo = m.data().iter().fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
        let hi = m.data().iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let s = m.sample([u, v])[0];
        prop_assert!(s >= lo && s <= hi);
        prop_assert_eq!(m.sample([u.clamp(-1.0, 1.0), v.clamp(-1.0, 1.0)]), m.sample([u, v]));
    }
}

#[test]
fn bilinear_midpoint_is_mean_of_four() {
    let m = FeatureMap::new(2, 1, vec![1.0, 2.0, 4.0, 9.0]).unwrap();
    assert_eq!(m.sample([0.0, 0.0]), vec![4.0]);
}

#[test]
fn half_fov_hits_image_edge() {
    let v = CameraView::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 40.0, 800, 600).unwrap();
    let (fx, fy, cx, cy) = v.intrinsics();
    let half_x = (cx / fx).atan();
    let half_y = 20f64.to_radians();
    assert!((cy / fy - half_y.tan()).abs() < 1e-15);
    let z = 3.0;
    // look_at with up = −y keeps camera +x on world +x.
    for (p, want) in [
        ([z * half_x.tan(), 0.0, 0.0], [1.0, 0.0]),
        ([-z * half_x.tan(), 0.0, 0.0], [-1.0, 0.0]),
        ([0.0, z * half_y.tan(), 0.0], [0.0, 1.0]),
    ] {
        let uv = v.project(p).uv;
        assert!((uv[0] - want[0]).abs() <= 1e-9 && (uv[1] - want[1]).abs() <= 1e-9, "{uv:?} vs {want:?}");
    }
}

#[test]
fn feature_map_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = random_map(&mut rng, 37, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vfmp");
    m.save(&path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 37 * 37 * 8 * 4);
    assert_eq!(FeatureMap::load(&path).unwrap(), m);
}
