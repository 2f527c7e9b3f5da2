//! Conditional flow matching from token features to mel frames.
//!
//! A small tanh network predicts the velocity of the straight-line path
//! between a standard-normal sample and a target mel frame, given the time,
//! the upsampled token frame and a speaker embedding. Sampling integrates
//! that field with explicit Euler steps.

mod checkpoint;
mod frames;
mod model;
mod ode;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, decode_frames, encode_checkpoint, encode_frames, load_checkpoint, load_frames, save_checkpoint,
    save_frames, CheckpointHeader, FrameHeader,
};
pub use frames::{upsample_tokens, FrameSequence, TOKEN_RATE_HZ, UPSAMPLE_RATIO};
pub use model::{vf_forward, Mlp, ModelDims, VectorFieldModel};
pub use ode::{generate_mel, ode_integrate};
pub use train::{
    cfm_sample_path, eval_loss, train_flow, vf_loss, vf_loss_and_grad, vf_train_step, Adam, FlowSample,
    FlowTask, FlowTrainConfig, GaussianShiftTask, SyntheticMelTask, TrainReport,
};

/// Mel bins per frame.
pub const DEFAULT_MEL_DIM: usize = 80;
pub const DEFAULT_SPEAKER_DIM: usize = 8;
pub const DEFAULT_ODE_STEPS: usize = 32;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("{what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("need at least 2 frames to upsample, got {frames}")]
    TooShort { frames: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at step {step}: non-finite gradient or parameters")]
    Divergence { step: usize },
    #[error("ODE state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

/// Fixed-width speaker conditioning vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SpeakerEmbedding(Vec<f64>);

impl SpeakerEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self, FlowError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("speaker embedding"));
        }
        Ok(Self(values))
    }

    /// Deterministic unit-scale random vector standing in for the
    /// embedding of synthetic speaker `id`.
    pub fn synthetic(id: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        rng.set_stream(0x5be4);
        let scale = 1.0 / (dim.max(1) as f64).sqrt();
        Self(
            (0..dim)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl<'de> Deserialize<'de> for SpeakerEmbedding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Self::new(Vec::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}
