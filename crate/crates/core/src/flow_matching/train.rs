use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{ModelDims, VectorFieldModel};
use super::{FlowError, SpeakerEmbedding};

/// Point on the straight path from `x0` to `x1` and the path's velocity.
pub fn cfm_sample_path(x0: &[f64], x1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
    if x0.len() != x1.len() {
        return Err(FlowError::ShapeMismatch {
            what: "path endpoints",
            expected: x0.len(),
            found: x1.len(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::InvalidConfig(format!("t must be in [0, 1], got {t}")));
    }
    let xt = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let u = x0.iter().zip(x1).map(|(a, b)| b - a).collect();
    Ok((xt, u))
}

/// One training example: noise `x0`, data `x1`, time `t` and conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub cond: Vec<f64>,
    pub speaker: Vec<f64>,
}

fn network_batch(model: &VectorFieldModel, batch: &[FlowSample]) -> Result<Vec<(Vec<f64>, Vec<f64>)>, FlowError> {
    batch
        .iter()
        .map(|s| {
            let (xt, u) = cfm_sample_path(&s.x0, &s.x1, s.t)?;
            Ok((model.assemble_input(&xt, s.t, &s.cond, &s.speaker)?, u))
        })
        .collect()
}

/// Mean absolute error between predicted and path velocities over every
/// batch element and dimension.
pub fn vf_loss(model: &VectorFieldModel, batch: &[FlowSample]) -> Result<f64, FlowError> {
    Ok(vf_loss_and_grad(model, batch)?.0)
}

/// Loss and its exact gradient with respect to the flat parameters.
pub fn vf_loss_and_grad(model: &VectorFieldModel, batch: &[FlowSample]) -> Result<(f64, Vec<f64>), FlowError> {
    if batch.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    model.network().l1_loss_and_grad(&network_batch(model, batch)?)
}

/// One plain gradient-descent step. Returns the updated model and the
/// loss before the step.
pub fn vf_train_step(
    model: &VectorFieldModel,
    batch: &[FlowSample],
    learning_rate: f64,
) -> Result<(VectorFieldModel, f64), FlowError> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(FlowError::InvalidConfig(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    let (loss, grad) = vf_loss_and_grad(model, batch)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(FlowError::Divergence { step: 0 });
    }
    let mut next = model.clone();
    for (p, g) in next.params_mut().iter_mut().zip(&grad) {
        *p -= learning_rate * g;
    }
    if next.params().iter().any(|p| !p.is_finite()) {
        return Err(FlowError::Divergence { step: 0 });
    }
    Ok((next, loss))
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Zero is allowed and leaves the model at its initialization.
    pub steps: usize,
    pub ode_steps: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 2000,
            ode_steps: super::DEFAULT_ODE_STEPS,
            seed: 0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FlowError::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(FlowError::InvalidConfig("batch size must be positive".into()));
        }
        if self.ode_steps == 0 {
            return Err(FlowError::InvalidConfig("ODE step count must be positive".into()));
        }
        Ok(())
    }
}

/// Source of training data: draws a target frame with its conditioning.
pub trait FlowTask {
    fn dims(&self) -> ModelDims;

    /// Returns `(x1, cond, speaker)`.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>);

    fn batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<FlowSample> {
        let d = self.dims().state;
        (0..n)
            .map(|_| {
                let (x1, cond, speaker) = self.sample(rng);
                let x0 = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let t = rng.random::<f64>();
                FlowSample {
                    x0,
                    x1,
                    t,
                    cond,
                    speaker,
                }
            })
            .collect()
    }
}

/// Unconditional target `N(mean, std^2 I)`.
#[derive(Debug, Clone)]
pub struct GaussianShiftTask {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl FlowTask for GaussianShiftTask {
    fn dims(&self) -> ModelDims {
        ModelDims {
            state: self.mean.len(),
            cond: 0,
            speaker: 0,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x1 = self
            .mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.std * z
            })
            .collect();
        (x1, Vec::new(), Vec::new())
    }
}

/// Synthetic token-to-mel mapping shaped like a log-mel spectrogram: a
/// falling spectral tilt plus a smooth envelope built from a few cosine
/// shapes across the bins. The envelope weights are a bounded nonlinear
/// function of the token frame and the speaker embedding. Token frames are
/// drawn from `N(0, I)`.
#[derive(Debug, Clone)]
pub struct SyntheticMelTask {
    dims: ModelDims,
    rank: usize,
    token_weights: Vec<f64>,
    speaker_weights: Vec<f64>,
    speakers: Vec<SpeakerEmbedding>,
}

impl SyntheticMelTask {
    /// Number of envelope shapes.
    pub const DEFAULT_RANK: usize = 6;
    const TILT_TOP: f64 = -4.0;
    const TILT_BOTTOM: f64 = -7.0;
    const AMPLITUDE: f64 = 1.5;

    pub fn new(mel_dim: usize, token_dim: usize, speaker_dim: usize, num_speakers: usize, seed: u64) -> Result<Self, FlowError> {
        Self::with_rank(mel_dim, token_dim, speaker_dim, num_speakers, Self::DEFAULT_RANK, seed)
    }

    pub fn with_rank(
        mel_dim: usize,
        token_dim: usize,
        speaker_dim: usize,
        num_speakers: usize,
        rank: usize,
        seed: u64,
    ) -> Result<Self, FlowError> {
        if mel_dim == 0 || num_speakers == 0 || rank == 0 {
            return Err(FlowError::InvalidConfig(
                "mel dim, speaker count and rank must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = |cols: usize| -> Vec<f64> {
            let scale = 1.0 / (cols.max(1) as f64).sqrt();
            (0..rank * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect()
        };
        let token_weights = matrix(token_dim);
        let speaker_weights = matrix(speaker_dim);
        let speakers = (0..num_speakers as u64)
            .map(|id| SpeakerEmbedding::synthetic(id, speaker_dim))
            .collect();
        Ok(Self {
            dims: ModelDims {
                state: mel_dim,
                cond: token_dim,
                speaker: speaker_dim,
            },
            rank,
            token_weights,
            speaker_weights,
            speakers,
        })
    }

    pub fn speakers(&self) -> &[SpeakerEmbedding] {
        &self.speakers
    }

    /// Noise-free mel frame for a token frame and speaker.
    pub fn mel_frame(&self, token: &[f64], speaker: &[f64]) -> Vec<f64> {
        let (c, s, d) = (self.dims.cond, self.dims.speaker, self.dims.state);
        let weights: Vec<f64> = (0..self.rank)
            .map(|k| {
                let a: f64 = self.token_weights[k * c..(k + 1) * c].iter().zip(token).map(|(w, x)| w * x).sum();
                let b: f64 = self.speaker_weights[k * s..(k + 1) * s].iter().zip(speaker).map(|(w, x)| w * x).sum();
                (a + b).tanh()
            })
            .collect();
        let norm = Self::AMPLITUDE / (self.rank as f64).sqrt();
        (0..d)
            .map(|i| {
                let pos = (i as f64 + 0.5) / d as f64;
                let tilt = Self::TILT_TOP + (Self::TILT_BOTTOM - Self::TILT_TOP) * pos;
                let envelope: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * (std::f64::consts::PI * (k + 1) as f64 * pos).cos())
                    .sum();
                tilt + norm * envelope
            })
            .collect()
    }
}

impl FlowTask for SyntheticMelTask {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let token: Vec<f64> = (0..self.dims.cond).map(|_| StandardNormal.sample(rng)).collect();
        let speaker = self.speakers[rng.random_range(0..self.speakers.len())].values().to_vec();
        (self.mel_frame(&token, &speaker), token, speaker)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss before each step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Trains `model` on fresh batches from `task` with Adam.
pub fn train_flow(
    model: &mut VectorFieldModel,
    task: &dyn FlowTask,
    config: &FlowTrainConfig,
) -> Result<TrainReport, FlowError> {
    config.validate()?;
    if task.dims() != model.dims() {
        return Err(FlowError::InvalidConfig(format!(
            "task dims {:?} do not match model dims {:?}",
            task.dims(),
            model.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.param_count(), config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = task.batch(config.batch_size, &mut rng);
        let (loss, grad) = vf_loss_and_grad(model, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(FlowError::Divergence { step });
        }
        adam.step(model.params_mut(), &grad);
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(FlowError::Divergence { step });
        }
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("step {step}: loss {loss:.6}");
        }
    }
    Ok(TrainReport { losses })
}

/// Loss on `n` samples drawn from `task` with its own seed.
pub fn eval_loss(model: &VectorFieldModel, task: &dyn FlowTask, n: usize, seed: u64) -> Result<f64, FlowError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vf_loss(model, &task.batch(n, &mut rng))
}
