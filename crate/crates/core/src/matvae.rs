//! Variational autoencoder over normalized material triplets with a 2-D latent
//! space, a radial-flow posterior, a decomposed KL term and free-nats floor.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid, numeric, Error, Result};
use crate::mtd::{MaterialTriplet, Normalizer};
use crate::nn::{clip_grad_norm, cosine_lr, AdamW, DropoutMasks, ResMlp, ResMlpCache, ResMlpShape};

pub const LATENT_DIM: usize = 2;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;
const ALPHA_EPS: f64 = 1e-6;
const RADIUS_EPS: f64 = 1e-8;
const BETA_H_CLAMP: f64 = 30.0;
/// Largest Poisson ratio a decoded triplet may carry.
pub const NU_DECODE_MAX: f64 = 0.4999;

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Radial flow `z = u + β h(r) (u − z0)`, `h = 1/(α + r)`, with α and β derived from unconstrained raws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialFlow {
    pub z0: [f64; 2],
    pub log_alpha_raw: f64,
    pub beta_raw: f64,
}

/// Gradients of a scalar with respect to the flow's raw parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlowGrad {
    pub z0: [f64; 2],
    pub log_alpha_raw: f64,
    pub beta_raw: f64,
}

impl FlowGrad {
    pub fn as_array(&self) -> [f64; 4] {
        [self.z0[0], self.z0[1], self.log_alpha_raw, self.beta_raw]
    }
}

struct FlowTape {
    diff: [f64; 2],
    n: f64,
    r: f64,
    h: f64,
    s: f64,
    gate: f64,
    a: f64,
    bq: f64,
}

impl RadialFlow {
    /// Flow with β = 0, i.e. the identity map.
    pub fn identity() -> Self {
        let alpha = softplus(0.0) + ALPHA_EPS;
        // Walk the raw value by ulps until softplus reproduces α exactly, so β is exactly zero.
        let mut raw = softplus_inv(alpha);
        for _ in 0..64 {
            let d = softplus(raw) - alpha;
            if d == 0.0 {
                break;
            }
            raw = if d > 0.0 { raw.next_down() } else { raw.next_up() };
        }
        Self { z0: [0.0; 2], log_alpha_raw: 0.0, beta_raw: raw }
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.log_alpha_raw) + ALPHA_EPS
    }

    pub fn beta(&self) -> f64 {
        -self.alpha() + softplus(self.beta_raw)
    }

    fn tape(&self, u: [f64; 2]) -> Result<([f64; 2], f64, FlowTape)> {
        let alpha = self.alpha();
        let beta = self.beta();
        let diff = [u[0] - self.z0[0], u[1] - self.z0[1]];
        let n = diff[0].hypot(diff[1]);
        let r = n + RADIUS_EPS;
        let h = 1.0 / (alpha + r);
        let s = beta * h;
        let bs = s.clamp(-BETA_H_CLAMP, BETA_H_CLAMP);
        let gate = if s.abs() < BETA_H_CLAMP { 1.0 } else { 0.0 };
        let a = 1.0 + bs;
        let bq = 1.0 + bs - beta * h * h * r;
        if !(a > 0.0 && bq > 0.0) {
            return Err(numeric(format!("radial flow log-determinant argument not positive (alpha={alpha}, beta={beta})")));
        }
        let z = [u[0] + s * diff[0], u[1] + s * diff[1]];
        let log_det = (LATENT_DIM as f64 - 1.0) * a.ln() + bq.ln();
        Ok((z, log_det, FlowTape { diff, n, r, h, s, gate, a, bq }))
    }

    /// Returns `(z, log |det ∂z/∂u|)`.
    pub fn forward(&self, u: [f64; 2]) -> Result<([f64; 2], f64)> {
        self.tape(u).map(|(z, ld, _)| (z, ld))
    }

    /// Back-propagates `(gz, g_ld)` through one flow evaluation; returns `d/du` and accumulates parameter gradients.
    fn backward(&self, t: &FlowTape, gz: [f64; 2], g_ld: f64, grad: &mut FlowGrad) -> [f64; 2] {
        let alpha_raw_sig = sigmoid(self.log_alpha_raw);
        let beta_raw_sig = sigmoid(self.beta_raw);
        let beta = self.beta();
        let FlowTape { diff, n, r, h, s, gate, a, bq } = *t;
        let d1 = LATENT_DIM as f64 - 1.0;
        let g_s = gz[0] * diff[0] + gz[1] * diff[1] + g_ld * gate * (d1 / a + 1.0 / bq);
        let g_q = -g_ld / bq;
        let h2 = h * h;
        let h3 = h2 * h;
        let g_r = g_s * (-beta * h2) + g_q * beta * (h2 - 2.0 * r * h3);
        let g_alpha = g_s * (-beta * h2) + g_q * (-2.0 * beta * r * h3);
        let g_beta = g_s * h + g_q * h2 * r;
        let radial = if n > 0.0 { g_r / n } else { 0.0 };
        let g_diff = [s * gz[0] + radial * diff[0], s * gz[1] + radial * diff[1]];
        grad.z0[0] -= g_diff[0];
        grad.z0[1] -= g_diff[1];
        grad.log_alpha_raw += (g_alpha - g_beta) * alpha_raw_sig;
        grad.beta_raw += g_beta * beta_raw_sig;
        [gz[0] + g_diff[0], gz[1] + g_diff[1]]
    }

    fn to_array(self) -> [f64; 4] {
        [self.z0[0], self.z0[1], self.log_alpha_raw, self.beta_raw]
    }

    fn from_array(p: [f64; 4]) -> Self {
        Self { z0: [p[0], p[1]], log_alpha_raw: p[2], beta_raw: p[3] }
    }
}

/// `u = μ + exp(logvar/2) ⊙ ε`.
pub fn reparameterize(mu: [f64; 2], logvar: [f64; 2], eps: [f64; 2]) -> [f64; 2] {
    [mu[0] + (0.5 * logvar[0]).exp() * eps[0], mu[1] + (0.5 * logvar[1]).exp() * eps[1]]
}

fn log_normal(x: f64, mu: f64, logvar: f64) -> f64 {
    let d = x - mu;
    -HALF_LOG_2PI - 0.5 * logvar - 0.5 * d * d * (-logvar).exp()
}

/// `log q(z|x)` by change of variables: base Gaussian density of `u` minus the flow log-determinant.
pub fn posterior_log_density(u: [f64; 2], mu: [f64; 2], logvar: [f64; 2], log_det: f64) -> f64 {
    log_normal(u[0], mu[0], logvar[0]) + log_normal(u[1], mu[1], logvar[1]) - log_det
}

/// One reparameterized posterior draw and its flowed image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSample {
    pub u: [f64; 2],
    pub mu: [f64; 2],
    pub logvar: [f64; 2],
    pub log_det: f64,
    pub z: [f64; 2],
}

/// How the aggregate posterior `q(z)` is approximated from a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Every batch member weighted `1/(N·B)`.
    #[default]
    MinibatchWeighted,
    /// Own sample weighted `1/N`, every other batch member `(N−1)/(N(B−1))`.
    Stratified,
}

impl KlEstimator {
    fn log_weights(&self, b: usize, n: usize) -> (f64, f64) {
        let (b, n) = (b as f64, n as f64);
        match self {
            KlEstimator::Stratified => (-(n.ln()), ((n - 1.0) / (n * (b - 1.0))).ln()),
            KlEstimator::MinibatchWeighted => (-(n * b).ln(), -(n * b).ln()),
        }
    }
}

/// Mutual information, total correlation and per-dimension KL estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlTerms {
    pub mi: f64,
    pub tc: f64,
    pub dim_kl: [f64; 2],
}

struct KlTape {
    b: usize,
    /// Softmax over `j` of the joint terms, `b × b`.
    p_joint: Vec<f64>,
    /// Softmax over `j` of the per-dimension terms, `b × b × 2`.
    p_dim: Vec<f64>,
}

fn logsumexp_softmax(row: &mut [f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    m + sum.ln()
}

fn kl_forward(samples: &[PosteriorSample], dataset_size: usize, est: KlEstimator) -> Result<(KlTerms, KlTape)> {
    let b = samples.len();
    if b < 2 {
        return Err(invalid("KL decomposition needs a batch of at least 2"));
    }
    if dataset_size < b {
        return Err(invalid(format!("dataset size {dataset_size} is smaller than the batch {b}")));
    }
    let (lw_own, lw_other) = est.log_weights(b, dataset_size);
    let mut p_joint = vec![0.0; b * b];
    let mut p_dim = vec![0.0; b * b * 2];
    let (mut mi, mut tc, mut dim_kl) = (0.0, 0.0, [0.0; 2]);
    let mut row_d = [vec![0.0; b], vec![0.0; b]];
    for (i, si) in samples.iter().enumerate() {
        let row = &mut p_joint[i * b..(i + 1) * b];
        for (j, sj) in samples.iter().enumerate() {
            let lw = if i == j { lw_own } else { lw_other };
            let l0 = log_normal(si.u[0], sj.mu[0], sj.logvar[0]);
            let l1 = log_normal(si.u[1], sj.mu[1], sj.logvar[1]);
            row[j] = l0 + l1 - si.log_det + lw;
            row_d[0][j] = l0 - 0.5 * si.log_det + lw;
            row_d[1][j] = l1 - 0.5 * si.log_det + lw;
        }
        let lq = logsumexp_softmax(row);
        let own = posterior_log_density(si.u, si.mu, si.logvar, si.log_det);
        let mut lq_dims = 0.0;
        for d in 0..2 {
            let lqd = logsumexp_softmax(&mut row_d[d]);
            for j in 0..b {
                p_dim[(i * b + j) * 2 + d] = row_d[d][j];
            }
            lq_dims += lqd;
            dim_kl[d] += lqd - (-HALF_LOG_2PI - 0.5 * si.z[d] * si.z[d]);
        }
        mi += own - lq;
        tc += lq - lq_dims;
    }
    let inv = 1.0 / b as f64;
    let terms = KlTerms { mi: mi * inv, tc: tc * inv, dim_kl: [dim_kl[0] * inv, dim_kl[1] * inv] };
    if !(terms.mi.is_finite() && terms.tc.is_finite() && terms.dim_kl.iter().all(|v| v.is_finite())) {
        return Err(numeric(format!("non-finite KL terms {terms:?}")));
    }
    Ok((terms, KlTape { b, p_joint, p_dim }))
}

/// Per-sample gradients of the KL side with respect to `u`, `μ`, `logvar`, `log_det` and `z`.
#[derive(Debug, Clone, Default)]
struct KlGrad {
    u: Vec<[f64; 2]>,
    mu: Vec<[f64; 2]>,
    logvar: Vec<[f64; 2]>,
    log_det: Vec<f64>,
    z: Vec<[f64; 2]>,
}

/// `c_own`, `c_lq`, `c_lqd[d]`, `c_lpd[d]` are the loss sensitivities to the per-sample
/// (already batch-averaged) log-densities.
fn kl_backward(samples: &[PosteriorSample], tape: &KlTape, c_own: f64, c_lq: f64, c_lqd: [f64; 2], c_lpd: [f64; 2]) -> KlGrad {
    let b = tape.b;
    let mut g = KlGrad {
        u: vec![[0.0; 2]; b],
        mu: vec![[0.0; 2]; b],
        logvar: vec![[0.0; 2]; b],
        log_det: vec![0.0; b],
        z: vec![[0.0; 2]; b],
    };
    let inv_var: Vec<[f64; 2]> = samples.iter().map(|s| [(-s.logvar[0]).exp(), (-s.logvar[1]).exp()]).collect();
    for (i, si) in samples.iter().enumerate() {
        let mut g_ld = -c_own;
        for (j, sj) in samples.iter().enumerate() {
            let da = c_lq * tape.p_joint[i * b + j];
            g_ld -= da;
            for d in 0..2 {
                let dad = c_lqd[d] * tape.p_dim[(i * b + j) * 2 + d];
                g_ld -= 0.5 * dad;
                let dl = da + dad + if i == j { c_own } else { 0.0 };
                let diff = si.u[d] - sj.mu[d];
                let w = diff * inv_var[j][d];
                g.u[i][d] -= dl * w;
                g.mu[j][d] += dl * w;
                g.logvar[j][d] += dl * 0.5 * (diff * w - 1.0);
            }
        }
        g.log_det[i] = g_ld;
        for d in 0..2 {
            g.z[i][d] = -c_lpd[d] * si.z[d];
        }
    }
    g
}

/// Estimates MI, TC and per-dimension KL from one minibatch of posterior draws.
pub fn kl_decomposition(samples: &[PosteriorSample], dataset_size: usize, estimator: KlEstimator) -> Result<KlTerms> {
    kl_forward(samples, dataset_size, estimator).map(|(t, _)| t)
}

/// Objective weights and schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub kl_anneal_epochs: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub gamma: f64,
    pub beta_tc: f64,
    pub alpha_dim: f64,
    pub free_nats: f64,
    pub estimator: KlEstimator,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 850,
            batch_size: 256,
            lr: 1e-4,
            lr_final: 1e-5,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            kl_anneal_epochs: 200,
            hidden: 256,
            blocks: 3,
            dropout: 0.05,
            gamma: 1.0,
            beta_tc: 2.0,
            alpha_dim: 1.0,
            free_nats: 0.1,
            estimator: KlEstimator::MinibatchWeighted,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Fraction of the KL weights in effect at `epoch`.
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if self.kl_anneal_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.kl_anneal_epochs as f64).min(1.0)
        }
    }

    /// Learning rate of `epoch`, cosine-annealed so the last epoch uses `lr_final`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs.saturating_sub(1).max(1), self.lr, self.lr_final)
    }
}

/// Reconstruction and KL terms of one batch and the weighted objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub mi: f64,
    pub tc: f64,
    pub dim_kl: [f64; 2],
    pub total: f64,
}

impl LossBreakdown {
    /// Combines the terms with KL-side weights scaled by `anneal`.
    pub fn combine(recon: f64, kl: KlTerms, hyper: &Hyperparams, anneal: f64) -> Self {
        let floored: f64 = kl.dim_kl.iter().map(|&d| d.max(hyper.free_nats)).sum();
        let total = recon + anneal * (hyper.gamma * kl.mi + hyper.beta_tc * kl.tc + hyper.alpha_dim * floored);
        Self { recon, mi: kl.mi, tc: kl.tc, dim_kl: kl.dim_kl, total }
    }
}

/// Random draws consumed by one training step; sampled up front so the loss is a deterministic function of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub eps: Vec<[f64; 2]>,
    pub encoder_masks: Option<DropoutMasks>,
    pub decoder_masks: Option<DropoutMasks>,
}

impl StepNoise {
    pub fn sample<R: Rng>(model: &MatVae, batch: usize, dropout: f64, rng: &mut R) -> Self {
        let eps = (0..batch).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let masks = |net: &ResMlp, rng: &mut R| (dropout > 0.0).then(|| DropoutMasks::sample(&net.shape(), batch, dropout, rng));
        let encoder_masks = masks(&model.encoder, rng);
        let decoder_masks = masks(&model.decoder, rng);
        Self { eps, encoder_masks, decoder_masks }
    }

    /// Noise with the given ε and no dropout.
    pub fn without_dropout(eps: Vec<[f64; 2]>) -> Self {
        Self { eps, encoder_masks: None, decoder_masks: None }
    }
}

/// Gradients for every trainable tensor of a [`MatVae`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatVaeGrad {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub flow: FlowGrad,
}

/// Bookkeeping stored with a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
}

/// Encoder, decoder, flow and the normalizer that maps triplets into the encoder's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct MatVae {
    pub normalizer: Normalizer,
    pub encoder: ResMlp,
    pub decoder: ResMlp,
    pub flow: RadialFlow,
    pub meta: TrainMeta,
}

fn check_finite_stage(net: &ResMlp, cache: &ResMlpCache, out: &[f64], which: &str) -> Result<()> {
    match net.nonfinite_stage(cache, out) {
        None => Ok(()),
        Some(k) => Err(numeric(format!("{which}: non-finite output at layer {k}"))),
    }
}

impl MatVae {
    pub fn encoder_shape(hidden: usize, blocks: usize) -> ResMlpShape {
        ResMlpShape { input: 3, hidden, blocks, output: 2 * LATENT_DIM }
    }

    pub fn decoder_shape(hidden: usize, blocks: usize) -> ResMlpShape {
        ResMlpShape { input: LATENT_DIM, hidden, blocks, output: 3 }
    }

    /// Randomly initialized model with an identity flow.
    pub fn init<R: Rng>(normalizer: Normalizer, hidden: usize, blocks: usize, rng: &mut R) -> Self {
        Self {
            normalizer,
            encoder: ResMlp::init(Self::encoder_shape(hidden, blocks), rng),
            decoder: ResMlp::init(Self::decoder_shape(hidden, blocks), rng),
            flow: RadialFlow::identity(),
            meta: TrainMeta::default(),
        }
    }

    /// All-zero weights, identity flow.
    pub fn zeros(normalizer: Normalizer, hidden: usize, blocks: usize) -> Self {
        Self {
            normalizer,
            encoder: ResMlp::zeros(Self::encoder_shape(hidden, blocks)),
            decoder: ResMlp::zeros(Self::decoder_shape(hidden, blocks)),
            flow: RadialFlow::identity(),
            meta: TrainMeta::default(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.encoder.shape().hidden
    }

    pub fn blocks(&self) -> usize {
        self.encoder.shape().blocks
    }

    /// Eval-mode encoder on normalized inputs (`n × 3`): returns `(μ, logvar)` per row.
    pub fn encoder_forward(&self, x: &[[f64; 3]]) -> Result<Vec<([f64; 2], [f64; 2])>> {
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        let (out, cache) = self.encoder.forward(&flat, x.len(), None);
        check_finite_stage(&self.encoder, &cache, &out, "encoder")?;
        Ok(out.chunks_exact(4).map(|o| ([o[0], o[1]], [o[2], o[3]])).collect())
    }

    /// Eval-mode decoder: normalized triplet per latent code.
    pub fn decoder_forward(&self, z: &[[f64; 2]]) -> Result<Vec<[f64; 3]>> {
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        let (out, cache) = self.decoder.forward(&flat, z.len(), None);
        check_finite_stage(&self.decoder, &cache, &out, "decoder")?;
        Ok(out.chunks_exact(3).map(|o| [o[0], o[1], o[2]]).collect())
    }

    /// Flowed posterior means of the given triplets.
    pub fn encode_batch(&self, triplets: &[MaterialTriplet]) -> Result<Vec<[f64; 2]>> {
        let x: Vec<[f64; 3]> = triplets.iter().map(|t| self.normalizer.normalize(t)).collect();
        self.encoder_forward(&x)?.into_iter().map(|(mu, _)| self.flow.forward(mu).map(|(z, _)| z)).collect()
    }

    pub fn encode(&self, t: &MaterialTriplet) -> Result<[f64; 2]> {
        Ok(self.encode_batch(std::slice::from_ref(t))?[0])
    }

    /// Maps decoder output back to a physical triplet, clamping ν to `[0, 0.4999]`.
    pub fn to_triplet(&self, x: [f64; 3]) -> MaterialTriplet {
        // Keeps 10^x finite and positive for arbitrarily far latent codes.
        let bound = |u: f64, [lo, hi]: [f64; 2]| {
            let span = hi - lo;
            u.clamp((-300.0 - lo) / span, (300.0 - lo) / span)
        };
        let mut t = self.normalizer.denormalize([
            bound(x[0], self.normalizer.log_e),
            x[1],
            bound(x[2], self.normalizer.log_rho),
        ]);
        t.nu = if t.nu.is_nan() { 0.0 } else { t.nu.clamp(0.0, NU_DECODE_MAX) };
        t
    }

    pub fn decode_batch(&self, z: &[[f64; 2]]) -> Result<Vec<MaterialTriplet>> {
        Ok(self.decoder_forward(z)?.into_iter().map(|x| self.to_triplet(x)).collect())
    }

    pub fn decode(&self, z: [f64; 2]) -> Result<MaterialTriplet> {
        Ok(self.decode_batch(&[z])?[0])
    }

    /// Decodes `steps` evenly spaced points on the latent segment between the codes of `a` and `b`.
    pub fn interpolate(&self, a: &MaterialTriplet, b: &MaterialTriplet, steps: usize) -> Result<Vec<MaterialTriplet>> {
        if steps < 2 {
            return Err(invalid("interpolation needs at least 2 steps"));
        }
        let za = self.encode(a)?;
        let zb = self.encode(b)?;
        let zs: Vec<[f64; 2]> = (0..steps)
            .map(|k| {
                let t = k as f64 / (steps - 1) as f64;
                if k == steps - 1 {
                    zb
                } else {
                    [za[0] + t * (zb[0] - za[0]), za[1] + t * (zb[1] - za[1])]
                }
            })
            .collect();
        self.decode_batch(&zs)
    }

    /// Decodes `count` standard-normal latent draws.
    pub fn sample_prior(&self, count: usize, seed: u64) -> Result<Vec<MaterialTriplet>> {
        if count == 0 {
            return Err(invalid("sample count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs: Vec<[f64; 2]> = (0..count).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        self.decode_batch(&zs)
    }

    /// Loss of one batch of normalized inputs and gradients of all trainable parameters.
    pub fn loss_and_grad(
        &self,
        x: &[[f64; 3]],
        noise: &StepNoise,
        hyper: &Hyperparams,
        epoch: usize,
        dataset_size: usize,
    ) -> Result<(LossBreakdown, MatVaeGrad)> {
        let b = x.len();
        if noise.eps.len() != b {
            return Err(invalid("noise batch size does not match the input batch"));
        }
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        let (enc_out, enc_cache) = self.encoder.forward(&flat, b, noise.encoder_masks.as_ref());
        let mut samples = Vec::with_capacity(b);
        let mut tapes = Vec::with_capacity(b);
        for (o, eps) in enc_out.chunks_exact(4).zip(&noise.eps) {
            let mu = [o[0], o[1]];
            let logvar = [o[2], o[3]];
            let u = reparameterize(mu, logvar, *eps);
            let (z, log_det, tape) = self.flow.tape(u)?;
            samples.push(PosteriorSample { u, mu, logvar, log_det, z });
            tapes.push(tape);
        }
        let zflat: Vec<f64> = samples.iter().flat_map(|s| s.z).collect();
        let (dec_out, dec_cache) = self.decoder.forward(&zflat, b, noise.decoder_masks.as_ref());
        let n_recon = (3 * b) as f64;
        let recon = dec_out.iter().zip(&flat).map(|(y, t)| (y - t) * (y - t)).sum::<f64>() / n_recon;
        let (kl, kl_tape) = kl_forward(&samples, dataset_size, hyper.estimator)?;
        let anneal = hyper.kl_weight(epoch);
        let breakdown = LossBreakdown::combine(recon, kl, hyper, anneal);
        if !breakdown.total.is_finite() {
            return Err(numeric(format!("non-finite loss {breakdown:?}")));
        }

        // Reverse pass.
        let inv_b = 1.0 / b as f64;
        let active = |d: usize| if kl.dim_kl[d] > hyper.free_nats { hyper.alpha_dim } else { 0.0 };
        let c_own = anneal * hyper.gamma * inv_b;
        let c_lq = anneal * (hyper.beta_tc - hyper.gamma) * inv_b;
        let c_lqd = [anneal * (active(0) - hyper.beta_tc) * inv_b, anneal * (active(1) - hyper.beta_tc) * inv_b];
        let c_lpd = [-anneal * active(0) * inv_b, -anneal * active(1) * inv_b];
        let kg = kl_backward(&samples, &kl_tape, c_own, c_lq, c_lqd, c_lpd);

        let d_dec: Vec<f64> = dec_out.iter().zip(&flat).map(|(y, t)| 2.0 * (y - t) / n_recon).collect();
        let mut g_dec = vec![0.0; self.decoder.num_params()];
        let dz = self.decoder.backward(&dec_cache, &d_dec, Some(&mut g_dec));
        let mut g_flow = FlowGrad::default();
        let mut d_enc = vec![0.0; 4 * b];
        for i in 0..b {
            let gz = [dz[2 * i] + kg.z[i][0], dz[2 * i + 1] + kg.z[i][1]];
            let mut du = self.flow.backward(&tapes[i], gz, kg.log_det[i], &mut g_flow);
            du[0] += kg.u[i][0];
            du[1] += kg.u[i][1];
            let s = &samples[i];
            let eps = noise.eps[i];
            for d in 0..2 {
                let sd = (0.5 * s.logvar[d]).exp();
                d_enc[4 * i + d] = du[d] + kg.mu[i][d];
                d_enc[4 * i + 2 + d] = du[d] * eps[d] * 0.5 * sd + kg.logvar[i][d];
            }
        }
        let mut g_enc = vec![0.0; self.encoder.num_params()];
        self.encoder.backward(&enc_cache, &d_enc, Some(&mut g_enc));
        Ok((breakdown, MatVaeGrad { encoder: g_enc, decoder: g_dec, flow: g_flow }))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "version": 1,
            "normalizer": self.normalizer,
            "architecture": {"hidden": self.hidden(), "blocks": self.blocks()},
            "encoder": self.encoder.tensors_json(),
            "decoder": self.decoder.tensors_json(),
            "flow": {"z0": self.flow.z0, "log_alpha_raw": self.flow.log_alpha_raw, "beta_raw": self.flow.beta_raw},
            "meta": self.meta,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "model checkpoint", detail };
        if v.get("version").and_then(Value::as_u64) != Some(1) {
            return Err(bad("unsupported or missing version".into()));
        }
        let field = |k: &str| v.get(k).ok_or_else(|| bad(format!("missing '{k}'")));
        let normalizer: Normalizer = serde_json::from_value(field("normalizer")?.clone())?;
        normalizer.check()?;
        let arch = field("architecture")?;
        let dim = |k: &str| arch.get(k).and_then(Value::as_u64).map(|x| x as usize).ok_or_else(|| bad(format!("missing architecture.{k}")));
        let mut model = Self::zeros(normalizer, dim("hidden")?, dim("blocks")?);
        let tensors = |k: &str| field(k)?.as_array().cloned().ok_or_else(|| bad(format!("'{k}' is not a list")));
        model.encoder.load_tensors_json(&tensors("encoder")?).map_err(|e| bad(format!("encoder: {e}")))?;
        model.decoder.load_tensors_json(&tensors("decoder")?).map_err(|e| bad(format!("decoder: {e}")))?;
        model.flow = serde_json::from_value(field("flow")?.clone())?;
        model.meta = serde_json::from_value(field("meta")?.clone())?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-size-weighted means of the batch losses.
    pub loss: LossBreakdown,
}

/// Trains a model on raw triplets; the normalizer is fitted to them.
pub fn train(triplets: &[MaterialTriplet], hyper: &Hyperparams) -> Result<(MatVae, Vec<EpochStats>)> {
    train_with(triplets, hyper, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    triplets: &[MaterialTriplet],
    hyper: &Hyperparams,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(MatVae, Vec<EpochStats>)> {
    if triplets.len() < hyper.batch_size.max(2) {
        return Err(invalid(format!("need at least {} triplets, got {}", hyper.batch_size.max(2), triplets.len())));
    }
    for t in triplets {
        t.validate()?;
    }
    let normalizer = Normalizer::fit(triplets)?;
    let data: Vec<[f64; 3]> = triplets.iter().map(|t| normalizer.normalize(t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut model = MatVae::init(normalizer, hyper.hidden, hyper.blocks, &mut rng);
    model.meta = TrainMeta { seed: hyper.seed, epochs: hyper.epochs };
    let mut opt_enc = AdamW::new(model.encoder.num_params(), hyper.weight_decay);
    let mut opt_dec = AdamW::new(model.decoder.num_params(), hyper.weight_decay);
    let mut opt_flow = AdamW::new(4, hyper.weight_decay);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut batch = Vec::with_capacity(hyper.batch_size);
    for epoch in 0..hyper.epochs {
        let lr = hyper.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut acc = [0.0f64; 6];
        let mut seen = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i]));
            let noise = StepNoise::sample(&model, batch.len(), hyper.dropout, &mut rng);
            let (loss, grad) = model
                .loss_and_grad(&batch, &noise, hyper, epoch, n)
                .map_err(|e| numeric(format!("epoch {epoch}: {e}; largest |weight| {}", max_abs(&model))))?;
            let MatVaeGrad { encoder: mut ge, decoder: mut gd, flow } = grad;
            let mut gf = flow.as_array();
            clip_grad_norm(&mut [&mut ge, &mut gd, &mut gf], hyper.grad_clip);
            opt_enc.step(&mut model.encoder.params, &ge, lr);
            opt_dec.step(&mut model.decoder.params, &gd, lr);
            let mut fp = model.flow.to_array();
            opt_flow.step(&mut fp, &gf, lr);
            model.flow = RadialFlow::from_array(fp);
            let w = batch.len() as f64;
            for (a, v) in acc.iter_mut().zip([loss.recon, loss.mi, loss.tc, loss.dim_kl[0], loss.dim_kl[1], loss.total]) {
                *a += w * v;
            }
            seen += batch.len();
        }
        let m = 1.0 / seen.max(1) as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: LossBreakdown { recon: acc[0] * m, mi: acc[1] * m, tc: acc[2] * m, dim_kl: [acc[3] * m, acc[4] * m], total: acc[5] * m },
        };
        if epoch % 50 == 0 || epoch + 1 == hyper.epochs {
            log::info!("epoch {epoch}: lr {lr:.3e} loss {:.5} recon {:.5}", stats.loss.total, stats.loss.recon);
        }
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

fn max_abs(model: &MatVae) -> f64 {
    model.encoder.params.iter().chain(&model.decoder.params).fold(0.0, |m, v| m.max(v.abs()))
}

/// Linear interpolation of each raw property at fraction `t`.
pub fn naive_interpolate(a: &MaterialTriplet, b: &MaterialTriplet, t: f64) -> Result<MaterialTriplet> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolation fraction must lie in [0, 1], got {t}")));
    }
    let lerp = |x: f64, y: f64| x + t * (y - x);
    Ok(MaterialTriplet { e: lerp(a.e, b.e), nu: lerp(a.nu, b.nu), rho: lerp(a.rho, b.rho) })
}

/// Seeded shuffle split into `(train, test)` with `round(len · test_fraction)` test items.
pub fn split_train_test<T: Clone>(items: &[T], test_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((items.len() as f64 * test_fraction).round() as usize).min(items.len());
    let test = idx[..n_test].iter().map(|&i| items[i].clone()).collect();
    let train = idx[n_test..].iter().map(|&i| items[i].clone()).collect();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normalizer() -> Normalizer {
        Normalizer { log_e: [5.0, 12.0], nu: [0.0, 0.49], log_rho: [1.0, 4.5] }
    }

    #[test]
    fn identity_flow() {
        let f = RadialFlow::identity();
        assert_eq!(f.beta(), 0.0);
        let (z, ld) = f.forward([0.3, -1.2]).unwrap();
        assert_eq!(z, [0.3, -1.2]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn flow_at_center_is_fixed() {
        let f = RadialFlow { z0: [0.2, 0.1], log_alpha_raw: 0.4, beta_raw: 1.3 };
        let (z, _) = f.forward([0.2, 0.1]).unwrap();
        assert_eq!(z, [0.2, 0.1]);
    }

    #[test]
    fn derived_flow_parameters_stay_invertible() {
        for &la in &[-20.0, -3.0, 0.0, 2.0, 20.0] {
            for &br in &[-20.0, -1.0, 0.0, 5.0, 40.0] {
                let f = RadialFlow { z0: [0.0; 2], log_alpha_raw: la, beta_raw: br };
                assert!(f.alpha() > 0.0 && f.beta() > -f.alpha());
            }
        }
    }

    #[test]
    fn reparameterize_examples() {
        assert_eq!(reparameterize([0.0; 2], [0.0; 2], [1.0, -1.0]), [1.0, -1.0]);
        assert_eq!(reparameterize([0.4, -0.2], [-1e9; 2], [3.0, 2.0]), [0.4, -0.2]);
    }

    #[test]
    fn posterior_density_examples() {
        let base = posterior_log_density([0.0; 2], [0.0; 2], [0.0; 2], 0.0);
        assert!((base + 1.837877066409345).abs() < 1e-12);
        assert_eq!(posterior_log_density([0.0; 2], [0.0; 2], [0.0; 2], 1.0), base - 1.0);
        let shifted = posterior_log_density([2.0f64.sqrt(), 0.0], [0.0; 2], [2.0f64.ln(), 0.0], 0.0);
        let centered = posterior_log_density([0.0, 0.0], [0.0; 2], [2.0f64.ln(), 0.0], 0.0);
        assert!((centered - shifted - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_arithmetic() {
        let h = Hyperparams::default();
        let kl = KlTerms { mi: 0.2, tc: 0.1, dim_kl: [0.05, 0.3] };
        assert_eq!(LossBreakdown::combine(0.01, kl, &h, 1.0).total, 0.81);
        let small = KlTerms { mi: 0.0, tc: 0.0, dim_kl: [0.01, 0.02] };
        assert_eq!(LossBreakdown::combine(0.0, small, &h, 1.0).total, 0.2);
        assert_eq!(LossBreakdown::combine(0.37, kl, &h, 0.0).total, 0.37);
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = MatVae::zeros(normalizer(), 8, 2);
        assert_eq!(m.encoder_forward(&[[0.3, 0.2, 0.1]]).unwrap(), vec![([0.0; 2], [0.0; 2])]);
        assert_eq!(m.decoder_forward(&[[1.0, -2.0]]).unwrap(), vec![[0.0; 3]]);
    }

    #[test]
    fn kl_terms_vanish_for_prior_posteriors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<PosteriorSample> = (0..64)
            .map(|_| {
                let u = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                PosteriorSample { u, mu: [0.0; 2], logvar: [0.0; 2], log_det: 0.0, z: u }
            })
            .collect();
        let t = kl_decomposition(&samples, 1000, KlEstimator::Stratified).unwrap();
        assert!(t.mi.abs() < 1e-12 && t.tc.abs() < 1e-12 && t.dim_kl.iter().all(|d| d.abs() < 1e-12), "{t:?}");
    }

    #[test]
    fn kl_requires_two_samples() {
        let s = PosteriorSample { u: [0.0; 2], mu: [0.0; 2], logvar: [0.0; 2], log_det: 0.0, z: [0.0; 2] };
        assert!(kl_decomposition(&[s], 10, KlEstimator::Stratified).is_err());
    }

    #[test]
    fn naive_interpolation_endpoints() {
        let a = MaterialTriplet { e: 1e6, nu: 0.25, rho: 0.2 };
        let b = MaterialTriplet { e: 1.22e12, nu: 0.2, rho: 3500.0 };
        assert_eq!(naive_interpolate(&a, &b, 0.0).unwrap(), a);
        assert!(naive_interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn final_learning_rate() {
        let h = Hyperparams::default();
        assert!((h.lr_at(h.epochs - 1) - 1e-5).abs() < 1e-9);
        assert_eq!(h.lr_at(0), 1e-4);
    }

    #[test]
    fn decode_always_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MatVae::init(normalizer(), 16, 2, &mut rng);
        for _ in 0..200 {
            let z = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            m.decode(z).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = MatVae::init(normalizer(), 8, 2, &mut rng);
        m.flow = RadialFlow { z0: [0.1, -0.3], log_alpha_raw: 0.7, beta_raw: -0.2 };
        let text = serde_json::to_string(&m.to_json()).unwrap();
        let back = MatVae::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
