use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use voxmat::matvae::{Hyperparams, MatVae, RadialFlow, StepNoise};
use voxmat::mtd::Normalizer;
use voxmat_oracles::calculus::{gradient, rel_err};

fn model(seed: u64) -> MatVae {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normalizer { log_e: [5.0, 12.0], nu: [0.0, 0.49], log_rho: [1.0, 4.5] };
    let mut m = MatVae::init(n, 16, 3, &mut rng);
    m.flow = RadialFlow { z0: [0.3, -0.2], log_alpha_raw: -0.4, beta_raw: 0.9 };
    m
}

fn flat(m: &MatVae) -> Vec<f64> {
    let mut v = m.encoder.params.clone();
    v.extend(&m.decoder.params);
    v.extend([m.flow.z0[0], m.flow.z0[1], m.flow.log_alpha_raw, m.flow.beta_raw]);
    v
}

fn set_flat(m: &mut MatVae, p: &[f64]) {
    let ne = m.encoder.params.len();
    let nd = m.decoder.params.len();
    m.encoder.params.copy_from_slice(&p[..ne]);
    m.decoder.params.copy_from_slice(&p[ne..ne + nd]);
    m.flow = RadialFlow { z0: [p[ne + nd], p[ne + nd + 1]], log_alpha_raw: p[ne + nd + 2], beta_raw: p[ne + nd + 3] };
}

fn check(epoch: usize, dropout: f64, seed: u64) {
    let mut m = model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x: Vec<[f64; 3]> = (0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let noise = StepNoise::sample(&m, 4, dropout, &mut rng);
    let hyper = Hyperparams { dropout, ..Hyperparams::default() };
    let (loss, g) = m.loss_and_grad(&x, &noise, &hyper, epoch, 50).unwrap();
    let mut analytic = g.encoder.clone();
    analytic.extend(&g.decoder);
    analytic.extend(g.flow.as_array());
    let p0 = flat(&m);
    let numeric = gradient(
        &mut |p| {
            set_flat(&mut m, p);
            m.loss_and_grad(&x, &noise, &hyper, epoch, 50).unwrap().0.total
        },
        &p0,
        1e-5,
    );
    let mut worst = (0.0, 0);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(*a, *n, 1e-6);
        if e > worst.0 {
            worst = (e, k);
        }
    }
    assert!(worst.0 <= 1e-3, "epoch {epoch}: worst rel err {} at {} ({} vs {}); loss {loss:?}", worst.0, worst.1, analytic[worst.1], numeric[worst.1]);
}

#[test]
fn loss_gradients_match_finite_differences_before_annealing() {
    check(0, 0.0, 1);
}

#[test]
fn loss_gradients_match_finite_differences_mid_annealing() {
    check(90, 0.05, 2);
}

#[test]
fn loss_gradients_match_finite_differences_full_weight() {
    check(400, 0.05, 3);
}

#[test]
fn flow_log_det_matches_numerical_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let f = RadialFlow {
            z0: [rng.sample(StandardNormal), rng.sample(StandardNormal)],
            log_alpha_raw: rng.random_range(-3.0..3.0),
            beta_raw: rng.random_range(-4.0..4.0),
        };
        let u = [rng.sample::<f64, _>(StandardNormal) * 2.0, rng.sample::<f64, _>(StandardNormal) * 2.0];
        let (_, ld) = f.forward(u).unwrap();
        let jac = voxmat_oracles::calculus::jacobian(&|p| f.forward([p[0], p[1]]).unwrap().0.to_vec(), &u, 1e-6);
        let det = voxmat_oracles::calculus::determinant(&jac).abs();
        assert!(rel_err(ld.exp(), det, 0.0) <= 1e-4, "{f:?} u={u:?}: {} vs {det}", ld.exp());
    }
}
