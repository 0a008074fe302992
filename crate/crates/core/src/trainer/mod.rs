//! Built-in numeric core: synthetic regression data, input transforms,
//! funnel/brick MLPs with exact backpropagation, Adam, and the epoch loop.

mod adam;
mod checkpoint;
mod dataset;
mod matrix;
mod mlp;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT};
pub use dataset::{gen_dataset, transform, Dataset, DatasetParams, FeatureStats, TransformStyle};
pub use matrix::Matrix;
pub use mlp::{MlpKind, MlpModel, MlpShape};
pub(crate) use train::check_loss_name;
pub use train::{train, EpochLosses, TrainHyper, TrainState};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid parameter `{name}`: {message}")]
    InvalidParam { name: String, message: String },
    #[error("unknown transform style `{0}`")]
    UnknownStyle(String),
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: expected {expected} columns, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("diverged")]
    Diverged { epoch: u32 },
    #[error("unsupported loss function `{0}`")]
    UnsupportedLoss(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}
