use super::FlowError;

/// Frame rate of speech-token features.
pub const TOKEN_RATE_HZ: f64 = 50.0;
/// Token-to-mel frame-rate ratio (50 Hz tokens to 80 Hz mel frames).
pub const UPSAMPLE_RATIO: f64 = 1.6;

/// Time-major `T x D` matrix of f64 features with a frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    frame_rate_hz: f64,
}

impl FrameSequence {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, frame_rate_hz: f64) -> Result<Self, FlowError> {
        if data.len() != rows * dim {
            return Err(FlowError::ShapeMismatch {
                what: "frame data",
                expected: rows * dim,
                found: data.len(),
            });
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(FlowError::InvalidConfig(format!(
                "frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("frame data"));
        }
        Ok(Self {
            rows,
            dim,
            data,
            frame_rate_hz,
        })
    }

    pub fn from_frames(frames: &[Vec<f64>], dim: usize, frame_rate_hz: f64) -> Result<Self, FlowError> {
        let mut data = Vec::with_capacity(frames.len() * dim);
        for f in frames {
            if f.len() != dim {
                return Err(FlowError::ShapeMismatch {
                    what: "frame width",
                    expected: dim,
                    found: f.len(),
                });
            }
            data.extend_from_slice(f);
        }
        Self::new(frames.len(), dim, data, frame_rate_hz)
    }

    pub fn empty(dim: usize, frame_rate_hz: f64) -> Self {
        Self {
            rows: 0,
            dim,
            data: Vec::new(),
            frame_rate_hz,
        }
    }

    /// Number of frames (T).
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Feature width (D).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-width sequence has no data anyway
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    /// Row-major data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Appends `other`'s frames. Widths must agree; the frame rate of `self`
    /// is kept.
    pub fn extend(&mut self, other: &FrameSequence) -> Result<(), FlowError> {
        if other.dim != self.dim {
            return Err(FlowError::ShapeMismatch {
                what: "frame width",
                expected: self.dim,
                found: other.dim,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }
}

/// Linear-interpolation resampling to `round(ratio * T)` frames.
///
/// Output frame `i` samples the input at fractional position
/// `i * (T - 1) / (T' - 1)`, so the first and last frames are copied
/// exactly. The frame rate is scaled by `ratio`.
pub fn upsample_tokens(tokens: &FrameSequence, ratio: f64) -> Result<FrameSequence, FlowError> {
    let t_in = tokens.len();
    if t_in < 2 {
        return Err(FlowError::TooShort { frames: t_in });
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(FlowError::InvalidConfig(format!("ratio must be positive, got {ratio}")));
    }
    // f64::round rounds half away from zero
    let t_out = (ratio * t_in as f64).round() as usize;
    if t_out < 2 {
        return Err(FlowError::InvalidConfig(format!(
            "ratio {ratio} maps {t_in} frames to {t_out}"
        )));
    }
    let d = tokens.dim();
    let last = t_in - 1;
    let mut data = Vec::with_capacity(t_out * d);
    for i in 0..t_out {
        // integer numerator keeps the final position exactly `last`
        let pos = (i * last) as f64 / (t_out - 1) as f64;
        let lo = pos.floor() as usize;
        if lo >= last {
            data.extend_from_slice(tokens.frame(last));
            continue;
        }
        let frac = pos - lo as f64;
        let (a, b) = (tokens.frame(lo), tokens.frame(lo + 1));
        data.extend(a.iter().zip(b).map(|(&x, &y)| x + frac * (y - x)));
    }
    FrameSequence::new(t_out, d, data, tokens.frame_rate_hz() * ratio)
}
