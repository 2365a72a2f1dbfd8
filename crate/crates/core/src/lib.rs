//! Solid voxelization, a learned latent space of physically valid materials,
//! and per-voxel material field prediction and evaluation.

pub mod error;
pub mod featlift;
pub mod fieldpred;
pub mod matvae;
pub mod metrics;
pub mod mtd;
pub mod nn;
pub mod shapes;
pub mod transfer;
pub mod vec3;
pub mod voxelizer;

pub use error::{Error, Result};
