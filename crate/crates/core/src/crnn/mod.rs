//! Convolutional recurrent network for frame-level multi-label detection,
//! with hand-written backpropagation and an Adam optimizer.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use thiserror::Error;

use crate::audio::AudioError;
use crate::features::FeatureError;
use crate::labelgrid::LabelError;
use crate::synth::SynthError;

mod adam;
mod checkpoint;
pub mod layers;
mod network;
mod predict;
mod preset;
mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{ModelParams, CHECKPOINT_SCHEMA_VERSION};
pub use network::{bce_loss, ConvBlock, GruLayer, Network, TrainCache, PROB_CLIP};
pub use predict::{predict_frames, predict_recording, pool_seconds, SecondPooling};
pub use preset::{ArchitecturePreset, ConvBlockSpec, PresetName};
pub use train::{
    load_recordings, split_by_recording, train, train_on_recordings, EpochRecord, LabeledRecording, Supervision, TrainConfig,
    TrainingHistory,
};

/// Float types the network can run in: `f32` for training, `f64` for
/// gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum CrnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every cell in the batch is masked")]
    AllMasked,
    #[error("invalid architecture: {0}")]
    InvalidPreset(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("clip too short: no analysis frames")]
    ClipTooShort,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Dataset(#[from] SynthError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
