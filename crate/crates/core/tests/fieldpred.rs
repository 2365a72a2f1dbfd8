use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxmat::featlift::VoxelFeatures;
use voxmat::fieldpred::*;
use voxmat::matvae::MatVae;
use voxmat::mtd::{MaterialTriplet, Normalizer};
use voxmat::voxelizer::SolidVoxelization;
use voxmat_oracles::calculus::{gradient, rel_err};

fn vae() -> MatVae {
    let n = Normalizer { log_e: [5.0, 12.0], nu: [0.0, 0.49], log_rho: [1.0, 4.5] };
    MatVae::init(n, 16, 2, &mut ChaCha8Rng::seed_from_u64(3))
}

fn dataset(n: usize, channels: usize, seed: u64) -> AnnotatedVoxelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect();
    let features = VoxelFeatures {
        channels,
        data: (0..n * channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        visible: vec![true; n],
    };
    let materials = (0..n)
        .map(|i| if i % 2 == 0 { MaterialTriplet::new(2e9, 0.35, 1200.0) } else { MaterialTriplet::new(7e10, 0.33, 2700.0) }.unwrap())
        .collect();
    AnnotatedVoxelSet::new(SolidVoxelization::unlabeled(16, centers), features, materials).unwrap()
}

#[test]
fn head_gradient_matches_finite_differences() {
    let v = vae();
    let data = dataset(4, 5, 1);
    let mut head = PredictorHead::init(5, 12, 9).unwrap();
    let subset = [0, 1, 2, 3];
    let (_, analytic) = field_loss(&head, &v, &data, &subset).unwrap();
    let p0 = head.net.params.clone();
    let numeric = gradient(
        &mut |p| {
            head.net.params.copy_from_slice(p);
            field_loss(&head, &v, &data, &subset).unwrap().0
        },
        &p0,
        1e-5,
    );
    let worst = analytic.iter().zip(&numeric).map(|(a, n)| rel_err(*a, *n, 1e-6)).fold(0.0, f64::max);
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

#[test]
fn single_voxel_loss_is_its_squared_error() {
    let v = vae();
    let data = dataset(6, 3, 2);
    let head = PredictorHead::init(3, 8, 1).unwrap();
    let z = head.forward(data.features.row(4)).unwrap();
    let y = v.decoder_forward(&z).unwrap()[0];
    let t = v.normalizer.normalize(&data.materials[4]);
    let want: f64 = (0..3).map(|k| (y[k] - t[k]).powi(2)).sum();
    assert_eq!(field_loss(&head, &v, &data, &[4]).unwrap().0, want);
}

#[test]
fn matching_ground_truth_gives_zero_loss() {
    let v = vae();
    let head = PredictorHead::zeros(3, 8).unwrap();
    let decoded = v.decode([0.0, 0.0]).unwrap();
    let mut data = dataset(5, 3, 3);
    data.materials = vec![decoded; 5];
    let (loss, grad) = field_loss(&head, &v, &data, &[0, 1, 2, 3, 4]).unwrap();
    assert!(loss < 1e-24, "{loss}");
    assert!(grad.iter().all(|g| g.abs() < 1e-10));
}

#[test]
fn training_is_seeded_and_leaves_decoder_untouched() {
    let v = vae();
    let before = serde_json::to_string(&v.to_json()).unwrap();
    let data = dataset(300, 4, 4);
    let hyper = HeadHyperparams { epochs: 15, batch_size: 64, hidden: 16, subsample_cap: 200, seed: 5, ..HeadHyperparams::default() };
    let (a, hist) = train_head(&data, &v, &hyper).unwrap();
    let (b, _) = train_head(&data, &v, &hyper).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&v.to_json()).unwrap(), before);
    assert!(hist.last().unwrap() < &hist[0], "{hist:?}");
    let (c, _) = train_head(&data, &v, &HeadHyperparams { seed: 6, ..hyper }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn predictions_are_valid_and_deterministic() {
    let v = vae();
    let data = dataset(50, 4, 7);
    let head = PredictorHead::init(4, 16, 2).unwrap();
    let f = predict_field(&head, &v, &data.voxels, &data.features).unwrap();
    assert_eq!(f.len(), 50);
    for m in &f.materials {
        m.validate().unwrap();
    }
    assert_eq!(predict_field(&head, &v, &data.voxels, &data.features).unwrap(), f);
    let wrong = VoxelFeatures { channels: 3, data: vec![0.0; 150], visible: vec![true; 50] };
    assert!(predict_field(&head, &v, &data.voxels, &wrong).is_err());
}

#[test]
fn head_checkpoint_round_trip() {
    let head = PredictorHead::init(6, 10, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.json");
    head.save(&path).unwrap();
    assert_eq!(PredictorHead::load(&path).unwrap(), head);
}

#[test]
fn epoch_subsets_differ_between_seeds() {
    let a = stochastic_subsample(10_000, 1000, 1).unwrap();
    let b = stochastic_subsample(10_000, 1000, 2).unwrap();
    assert_eq!(a.len(), 1000);
    let common = a.iter().filter(|i| b.binary_search(i).is_ok()).count();
    let jaccard = common as f64 / (2000 - common) as f64;
    assert!(jaccard < 1.0);
}
