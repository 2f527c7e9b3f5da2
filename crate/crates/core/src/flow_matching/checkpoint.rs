//! Checkpoint and mel artifact files.
//!
//! Both share one framing: a u64 LE byte length, a JSON header of that
//! length, then a raw block of f64 LE values.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::frames::FrameSequence;
use super::model::{ModelDims, VectorFieldModel};
use super::FlowError;
use crate::io::{atomic_write, ByteReader};

const CHECKPOINT_FORMAT: &str = "emorag-vector-field";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub state_dim: usize,
    pub cond_dim: usize,
    pub speaker_dim: usize,
    pub seed: u64,
    pub activation: String,
    pub param_count: usize,
}

/// Mel (or token feature) artifact header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHeader {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub frame_rate_hz: f64,
}

fn encode<H: Serialize>(header: &H, values: &[f64]) -> Result<Vec<u8>, FlowError> {
    let json = serde_json::to_vec(header).map_err(|e| FlowError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + values.len() * 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode<H: DeserializeOwned>(bytes: &[u8], expected_values: impl FnOnce(&H) -> usize) -> Result<(H, Vec<f64>), FlowError> {
    let short = |e: crate::io::ShortRead| {
        FlowError::Format(format!("truncated at byte {}: wanted {}, {} left", e.offset, e.wanted, e.available))
    };
    let mut r = ByteReader::new(bytes);
    let len = r.u64().map_err(short)?;
    let len = usize::try_from(len).map_err(|_| FlowError::Format("header length overflows".into()))?;
    let header: H = serde_json::from_slice(r.take(len).map_err(short)?)
        .map_err(|e| FlowError::Format(format!("bad header: {e}")))?;
    let n = expected_values(&header);
    let expected_bytes = n
        .checked_mul(8)
        .ok_or_else(|| FlowError::Format("value count overflows".into()))?;
    if r.remaining() != expected_bytes {
        return Err(FlowError::Format(format!(
            "expected {expected_bytes} bytes of values, found {}",
            r.remaining()
        )));
    }
    let values = r
        .take(expected_bytes)
        .map_err(short)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}

pub fn encode_checkpoint(model: &VectorFieldModel) -> Result<Vec<u8>, FlowError> {
    let dims = model.dims();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        layer_sizes: model.layer_sizes().to_vec(),
        state_dim: dims.state,
        cond_dim: dims.cond,
        speaker_dim: dims.speaker,
        seed: model.seed(),
        activation: "tanh".into(),
        param_count: model.param_count(),
    };
    encode(&header, model.params())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<VectorFieldModel, FlowError> {
    let (h, params) = decode::<CheckpointHeader>(bytes, |h| h.param_count)?;
    if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
        return Err(FlowError::Format(format!("unsupported checkpoint {} v{}", h.format, h.version)));
    }
    if h.activation != "tanh" {
        return Err(FlowError::Format(format!("unsupported activation {}", h.activation)));
    }
    let dims = ModelDims {
        state: h.state_dim,
        cond: h.cond_dim,
        speaker: h.speaker_dim,
    };
    VectorFieldModel::from_parts(dims, h.layer_sizes, params, h.seed)
}

pub fn save_checkpoint(model: &VectorFieldModel, path: &Path) -> Result<(), FlowError> {
    Ok(atomic_write(path, &encode_checkpoint(model)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<VectorFieldModel, FlowError> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn encode_frames(seq: &FrameSequence) -> Result<Vec<u8>, FlowError> {
    let header = FrameHeader {
        frames: seq.len(),
        dim: seq.dim(),
        frame_rate_hz: seq.frame_rate_hz(),
    };
    encode(&header, seq.data())
}

pub fn decode_frames(bytes: &[u8]) -> Result<FrameSequence, FlowError> {
    let (h, data) = decode::<FrameHeader>(bytes, |h| h.frames.saturating_mul(h.dim))?;
    FrameSequence::new(h.frames, h.dim, data, h.frame_rate_hz)
}

pub fn save_frames(seq: &FrameSequence, path: &Path) -> Result<(), FlowError> {
    Ok(atomic_write(path, &encode_frames(seq)?)?)
}

pub fn load_frames(path: &Path) -> Result<FrameSequence, FlowError> {
    decode_frames(&std::fs::read(path)?)
}
