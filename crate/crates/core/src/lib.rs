//! Hierarchical self-supervised pre-training (image, task and group level
//! pretext losses plus reconstruction) and segmentation fine-tuning under
//! scarce annotations, on CPU.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`).
//! Training runs in `f32`; gradient checks rerun the same code in `f64`.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod runtime;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type ModelStateF32 = model::ModelState<f32>;
/// Gradient-check precision.
pub type ModelStateF64 = model::ModelState<f64>;
pub type CheckpointF32 = model::Checkpoint<f32>;
pub type CheckpointF64 = model::Checkpoint<f64>;
pub type MatrixF32 = nn::Matrix<f32>;
pub type MatrixF64 = nn::Matrix<f64>;
pub type FeatureMapF32 = nn::FeatureMap<f32>;
pub type FeatureMapF64 = nn::FeatureMap<f64>;
