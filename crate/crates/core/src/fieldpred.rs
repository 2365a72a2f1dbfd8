//! Per-voxel material prediction: a small MLP maps lifted features to latent codes,
//! which the frozen MatVAE decoder turns into material triplets.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid, numeric, Error, Result};
use crate::featlift::VoxelFeatures;
use crate::matvae::{MatVae, LATENT_DIM};
use crate::mtd::MaterialTriplet;
use crate::nn::{clip_grad_norm, cosine_lr, AdamW, Mlp};
use crate::transfer::{read_material_sidecar, MaterialField};
use crate::voxelizer::SolidVoxelization;

/// Largest number of voxels visited per epoch by default.
pub const SUBSAMPLE_CAP: usize = 32_768;

/// All of `0..count` when it fits under `cap`, otherwise `cap` distinct indices (sorted),
/// fixed by `seed`.
pub fn stochastic_subsample(count: usize, cap: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || cap == 0 {
        return Err(invalid("subsampling needs a non-empty set and a positive cap"));
    }
    if count <= cap {
        return Ok((0..count).collect());
    }
    let mut out = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), count, cap).into_vec();
    out.sort_unstable();
    Ok(out)
}

/// Feature → latent MLP: `c → H → H → 2` with SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHead {
    pub net: Mlp,
}

impl PredictorHead {
    pub fn init(channels: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::check_dims(channels, hidden)?;
        Ok(Self { net: Mlp::init(&[channels, hidden, hidden, LATENT_DIM], &mut ChaCha8Rng::seed_from_u64(seed)) })
    }

    pub fn zeros(channels: usize, hidden: usize) -> Result<Self> {
        Self::check_dims(channels, hidden)?;
        Ok(Self { net: Mlp::zeros(&[channels, hidden, hidden, LATENT_DIM]) })
    }

    fn check_dims(channels: usize, hidden: usize) -> Result<()> {
        if channels == 0 || hidden == 0 {
            return Err(invalid("head widths must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.net.input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.net.dims()[1]
    }

    /// Latent code per row of `features` (row-major, `channels` wide).
    pub fn forward(&self, features: &[f64]) -> Result<Vec<[f64; 2]>> {
        let c = self.channels();
        if features.len() % c != 0 {
            return Err(invalid(format!("feature buffer of {} values is not a multiple of {c} channels", features.len())));
        }
        let (out, _) = self.net.forward(features, features.len() / c);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(numeric("head produced a non-finite latent"));
        }
        Ok(out.chunks_exact(2).map(|o| [o[0], o[1]]).collect())
    }

    pub fn forward_features(&self, features: &VoxelFeatures) -> Result<Vec<[f64; 2]>> {
        if features.channels != self.channels() {
            return Err(invalid(format!("features have {} channels, head expects {}", features.channels, self.channels())));
        }
        self.forward(&features.data)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "version": 1,
            "architecture": {"channels": self.channels(), "hidden": self.hidden()},
            "head": self.net.tensors_json(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "head checkpoint", detail };
        if v.get("version").and_then(Value::as_u64) != Some(1) {
            return Err(bad("unsupported or missing version".into()));
        }
        let dim = |k: &str| {
            v.pointer(&format!("/architecture/{k}")).and_then(Value::as_u64).map(|x| x as usize).ok_or_else(|| bad(format!("missing architecture.{k}")))
        };
        let mut head = Self::zeros(dim("channels")?, dim("hidden")?)?;
        let tensors = v.get("head").and_then(Value::as_array).ok_or_else(|| bad("missing 'head' tensor list".into()))?;
        head.net.load_tensors_json(tensors).map_err(bad)?;
        if head.net.params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite weight".into()));
        }
        Ok(head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Voxels with lifted features and a ground-truth material each.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedVoxelSet {
    pub voxels: SolidVoxelization,
    pub features: VoxelFeatures,
    pub materials: Vec<MaterialTriplet>,
}

impl AnnotatedVoxelSet {
    pub fn new(voxels: SolidVoxelization, features: VoxelFeatures, materials: Vec<MaterialTriplet>) -> Result<Self> {
        if features.len() != voxels.len() || materials.len() != voxels.len() {
            return Err(invalid(format!(
                "{} voxels, {} feature rows and {} materials do not line up",
                voxels.len(),
                features.len(),
                materials.len()
            )));
        }
        for (i, m) in materials.iter().enumerate() {
            m.validate().map_err(|e| invalid(format!("voxel {i}: {e}")))?;
        }
        Ok(Self { voxels, features, materials })
    }

    pub fn len(&self) -> usize {
        self.materials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.materials.is_empty()
    }

    pub fn load(voxf: impl AsRef<Path>, features_csv: impl AsRef<Path>, materials_csv: impl AsRef<Path>) -> Result<Self> {
        let voxels = SolidVoxelization::load(voxf)?;
        let features = VoxelFeatures::read_csv(std::fs::File::open(features_csv)?)?;
        let materials = read_material_sidecar(std::fs::File::open(materials_csv)?, voxels.len())?;
        Self::new(voxels, features, materials)
    }

    /// The rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let c = self.features.channels;
        Self {
            voxels: SolidVoxelization {
                r: self.voxels.r,
                centers: idx.iter().map(|&i| self.voxels.centers[i]).collect(),
                lattice: idx.iter().map(|&i| self.voxels.lattice[i]).collect(),
                labels: self.voxels.labels.clone(),
                segments: idx.iter().map(|&i| self.voxels.segments[i]).collect(),
            },
            features: VoxelFeatures {
                channels: c,
                data: idx.iter().flat_map(|&i| self.features.row(i).to_vec()).collect(),
                visible: idx.iter().map(|&i| self.features.visible[i]).collect(),
            },
            materials: idx.iter().map(|&i| self.materials[i]).collect(),
        }
    }
}

/// Mean over `subset` of the squared distance between decoded and normalized ground-truth
/// triplets, with the gradient for the head's parameters. The decoder is only read.
pub fn field_loss(
    head: &PredictorHead,
    vae: &MatVae,
    data: &AnnotatedVoxelSet,
    subset: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let c = head.channels();
    if data.features.channels != c {
        return Err(invalid(format!("features have {} channels, head expects {c}", data.features.channels)));
    }
    if subset.is_empty() {
        return Err(invalid("loss subset is empty"));
    }
    if let Some(&i) = subset.iter().find(|&&i| i >= data.len()) {
        return Err(invalid(format!("subset index {i} out of range for {} voxels", data.len())));
    }
    let b = subset.len();
    let x: Vec<f64> = subset.iter().flat_map(|&i| data.features.row(i).iter().copied()).collect();
    let target: Vec<f64> = subset.iter().flat_map(|&i| vae.normalizer.normalize(&data.materials[i])).collect();
    let (z, head_cache) = head.net.forward(&x, b);
    let (y, dec_cache) = vae.decoder.forward(&z, b, None);
    let inv = 1.0 / b as f64;
    let loss = y.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() * inv;
    if !loss.is_finite() {
        return Err(numeric("field loss is not finite"));
    }
    let dy: Vec<f64> = y.iter().zip(&target).map(|(p, t)| 2.0 * (p - t) * inv).collect();
    let dz = vae.decoder.backward(&dec_cache, &dy, None);
    let mut grad = vec![0.0; head.net.params.len()];
    head.net.backward(&head_cache, &dz, &mut grad);
    Ok((loss, grad))
}

/// Training settings for [`train_head`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub hidden: usize,
    pub subsample_cap: usize,
    pub seed: u64,
}

impl Default for HeadHyperparams {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            lr_final: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            hidden: 128,
            subsample_cap: SUBSAMPLE_CAP,
            seed: 0,
        }
    }
}

/// Fits a fresh head with AdamW; every epoch draws its own voxel subset. Returns the head
/// and the per-epoch mean loss.
pub fn train_head(data: &AnnotatedVoxelSet, vae: &MatVae, hyper: &HeadHyperparams) -> Result<(PredictorHead, Vec<f64>)> {
    if data.is_empty() {
        return Err(invalid("no annotated voxels to train on"));
    }
    if hyper.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut head = PredictorHead::init(data.features.channels, hyper.hidden, hyper.seed)?;
    let mut opt = AdamW::new(head.net.params.len(), hyper.weight_decay);
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let lr = cosine_lr(epoch, hyper.epochs.saturating_sub(1).max(1), hyper.lr, hyper.lr_final);
        let epoch_seed = hyper.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut subset = stochastic_subsample(data.len(), hyper.subsample_cap, epoch_seed)?;
        subset.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in subset.chunks(hyper.batch_size) {
            let (loss, mut grad) = field_loss(&head, vae, data, chunk).map_err(|e| numeric(format!("epoch {epoch}: {e}")))?;
            clip_grad_norm(&mut [&mut grad], hyper.grad_clip);
            opt.step(&mut head.net.params, &grad, lr);
            total += loss * chunk.len() as f64;
        }
        let mean = total / subset.len() as f64;
        if epoch % 50 == 0 || epoch + 1 == hyper.epochs {
            log::info!("head epoch {epoch}: lr {lr:.3e} loss {mean:.6}");
        }
        history.push(mean);
    }
    Ok((head, history))
}

/// Decoded material for every voxel.
pub fn predict_field(
    head: &PredictorHead,
    vae: &MatVae,
    voxels: &SolidVoxelization,
    features: &VoxelFeatures,
) -> Result<MaterialField> {
    if features.len() != voxels.len() {
        return Err(invalid(format!("{} voxels but {} feature rows", voxels.len(), features.len())));
    }
    let z = head.forward_features(features)?;
    MaterialField::new(voxels.clone(), vae.decode_batch(&z)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_small_set_is_identity() {
        assert_eq!(stochastic_subsample(100, SUBSAMPLE_CAP, 3).unwrap(), (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_draws_distinct_indices() {
        let s = stochastic_subsample(10, 4, 1).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.windows(2).all(|w| w[0] < w[1]) && s[3] < 10);
        assert_eq!(s, stochastic_subsample(10, 4, 1).unwrap());
    }

    #[test]
    fn zero_head_gives_zero_latents() {
        let h = PredictorHead::zeros(5, 8).unwrap();
        assert_eq!(h.forward(&[1.0; 15]).unwrap(), vec![[0.0, 0.0]; 3]);
        assert!(h.forward(&[1.0; 7]).is_err());
    }
}
