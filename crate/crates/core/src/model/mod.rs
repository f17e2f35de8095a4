//! The assembled segmentation network and its training/inference drivers.
//!
//! A per-point encoder (linear, batch norm, ReLU) lifts each pillar's points
//! to 64 features; a max over each pillar's valid points produces one vector
//! per pillar, scattered to a dense pseudo-image at the pillar's grid cell.
//! A three-level U-Net of depthwise-separable double-convolution blocks with
//! channel/spatial attention on the encoder side turns the pseudo-image into
//! one logit per cell. Training uses focal loss, Adam, and a
//! reduce-on-plateau schedule; inference runs the full preprocessing chain
//! and propagates cell decisions back to the points.

pub mod batch;
pub mod checkpoint;
pub mod infer;
pub mod net;
pub mod train;

pub use batch::PillarBatch;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use infer::{infer, InferConfig, InferOutput, StageTimings};
pub use net::{GsecNet, ModelConfig};
pub use train::{evaluate_pillars, train, EpochRecord, Frame, TrainConfig, TrainReport};

use thiserror::Error;

use crate::blob::BlobError;
use crate::geometry::GeometryError;
use crate::neuralnet::NnError;
use crate::pillars::PillarError;
use crate::sampling::SamplingError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pillar(#[from] PillarError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("malformed pillar batch: {0}")]
    BadBatch(String),
}
