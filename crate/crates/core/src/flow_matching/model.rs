//! Dense tanh regressor used as the flow-matching vector field.
//!
//! Input layout is `[x_t (D) | t | cond (C) | speaker (S)]`, output is a
//! D-dimensional velocity. Parameters live in one flat vector, layer by
//! layer, each layer as a row-major `out x in` weight matrix followed by its
//! bias. Hidden layers use tanh; the output layer is linear.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::FlowError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Width of the transported state (mel bins).
    pub state: usize,
    /// Width of the per-frame conditioning (token features).
    pub cond: usize,
    /// Width of the speaker embedding.
    pub speaker: usize,
}

impl ModelDims {
    pub fn input(&self) -> usize {
        self.state + 1 + self.cond + self.speaker
    }
}

/// Fully connected network: tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer activations kept for backpropagation.
pub(crate) struct Trace {
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// All-zero network with the given layer widths, input first.
    pub fn zeros(sizes: &[usize]) -> Result<Self, FlowError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(FlowError::InvalidConfig(format!(
                "layer sizes must have at least two positive entries, got {sizes:?}"
            )));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
        })
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn seeded(sizes: &[usize], seed: u64) -> Result<Self, FlowError> {
        let mut mlp = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in mlp.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut mlp.params[offset..offset + fan_in * fan_out] {
                *p = normal.sample(&mut rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(mlp)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, FlowError> {
        let mut mlp = Self::zeros(sizes)?;
        if params.len() != mlp.params.len() {
            return Err(FlowError::ShapeMismatch {
                what: "parameter count",
                expected: mlp.params.len(),
                found: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FlowError::NonFinite("parameters"));
        }
        mlp.params = params;
        Ok(mlp)
    }

    /// Layer widths from input to output.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Mutable view of one layer as `(weights, bias)`; weights are
    /// row-major `out x in`.
    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let start: usize = self.sizes[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let (w, rest) = self.params[start..].split_at_mut(fan_in * fan_out);
        (w, &mut rest[..fan_out])
    }

    fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, FlowError> {
        if input.len() != self.input_dim() {
            return Err(FlowError::ShapeMismatch {
                what: "network input",
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        let mut trace = self.forward_trace(input.to_vec());
        Ok(trace.acts.pop().expect("at least one layer"))
    }

    pub(crate) fn forward_trace(&self, input: Vec<f64>) -> Trace {
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input);
        let mut offset = 0;
        let last = self.layer_count() - 1;
        for layer in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let a = &acts[layer];
            let mut z: Vec<f64> = w
                .chunks_exact(fan_in)
                .zip(b)
                .map(|(row, &bias)| bias + row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>())
                .collect();
            if layer != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
            offset += fan_in * fan_out + fan_out;
        }
        Trace { acts }
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    pub(crate) fn backward(&self, trace: &Trace, mut delta: Vec<f64>, grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layer_count());
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        for layer in (0..self.layer_count()).rev() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let start = offsets[layer];
            let a_prev = &trace.acts[layer];
            {
                let (gw, gb) =
                    grad[start..start + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(a_prev) {
                        *g += d * a;
                    }
                }
            }
            if layer == 0 {
                break;
            }
            let w = &self.params[start..start + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += wv * d;
                }
            }
            // hidden activations are tanh outputs: d tanh = 1 - a^2
            for (p, &a) in prev.iter_mut().zip(a_prev) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }

    /// Mean absolute error of the outputs against `targets` and its exact
    /// gradient (subgradient 0 where a residual is exactly zero).
    ///
    /// Samples are processed in fixed chunks of [`Self::CHUNK`], possibly on
    /// several threads; chunk results are summed in chunk order so the
    /// result does not depend on the thread count.
    pub fn l1_loss_and_grad(&self, samples: &[(Vec<f64>, Vec<f64>)]) -> Result<(f64, Vec<f64>), FlowError> {
        if samples.is_empty() {
            return Err(FlowError::EmptyBatch);
        }
        let out_dim = self.output_dim();
        for (input, target) in samples {
            if input.len() != self.input_dim() {
                return Err(FlowError::ShapeMismatch {
                    what: "network input",
                    expected: self.input_dim(),
                    found: input.len(),
                });
            }
            if target.len() != out_dim {
                return Err(FlowError::ShapeMismatch {
                    what: "target",
                    expected: out_dim,
                    found: target.len(),
                });
            }
        }
        let scale = 1.0 / (samples.len() * out_dim) as f64;
        let chunks: Vec<_> = samples.chunks(Self::CHUNK).collect();
        let workers = std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(chunks.len());
        let mut partial: Vec<Option<(f64, Vec<f64>)>> = vec![None; chunks.len()];
        if workers <= 1 {
            for (slot, chunk) in partial.iter_mut().zip(&chunks) {
                *slot = Some(self.chunk_loss_and_grad(chunk, scale));
            }
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let chunks = &chunks;
                        scope.spawn(move || {
                            (w..chunks.len())
                                .step_by(workers)
                                .map(|i| (i, self.chunk_loss_and_grad(chunks[i], scale)))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                for h in handles {
                    for (i, r) in h.join().expect("gradient worker panicked") {
                        partial[i] = Some(r);
                    }
                }
            });
        }
        let mut total = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        for (loss, g) in partial.into_iter().map(|p| p.expect("every chunk computed")) {
            total += loss;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((total * scale, grad))
    }

    /// Samples per unit of parallel work in [`Self::l1_loss_and_grad`].
    pub const CHUNK: usize = 16;

    fn chunk_loss_and_grad(&self, samples: &[(Vec<f64>, Vec<f64>)], scale: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for (input, target) in samples {
            let trace = self.forward_trace(input.clone());
            let out = trace.acts.last().expect("output layer");
            let delta: Vec<f64> = out
                .iter()
                .zip(target)
                .map(|(o, t)| {
                    let r = o - t;
                    total += r.abs();
                    // f64::signum(0.0) is 1.0, so zero residuals are handled explicitly
                    if r > 0.0 {
                        scale
                    } else if r < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect();
            self.backward(&trace, delta, &mut grad);
        }
        (total, grad)
    }
}

/// Vector field `v(x_t, t | cond, speaker)` over a D-dimensional state.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldModel {
    dims: ModelDims,
    net: Mlp,
    seed: u64,
}

impl VectorFieldModel {
    /// Model with the given hidden widths and weights drawn from
    /// `N(0, 1/fan_in)`; biases start at zero.
    pub fn new(dims: ModelDims, hidden: &[usize], seed: u64) -> Result<Self, FlowError> {
        let net = Mlp::seeded(&Self::chain(dims, hidden)?, seed)?;
        Ok(Self { dims, net, seed })
    }

    pub fn zeros(dims: ModelDims, hidden: &[usize]) -> Result<Self, FlowError> {
        let net = Mlp::zeros(&Self::chain(dims, hidden)?)?;
        Ok(Self { dims, net, seed: 0 })
    }

    fn chain(dims: ModelDims, hidden: &[usize]) -> Result<Vec<usize>, FlowError> {
        if dims.state == 0 {
            return Err(FlowError::InvalidConfig("state dimension must be positive".into()));
        }
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(dims.input());
        sizes.extend_from_slice(hidden);
        sizes.push(dims.state);
        Ok(sizes)
    }

    /// Rebuilds a model from a layer-size chain and flat parameters.
    pub fn from_parts(dims: ModelDims, sizes: Vec<usize>, params: Vec<f64>, seed: u64) -> Result<Self, FlowError> {
        if sizes.len() < 2 || sizes[0] != dims.input() || *sizes.last().unwrap() != dims.state {
            return Err(FlowError::InvalidConfig(format!(
                "layer sizes {sizes:?} do not chain from input {} to output {}",
                dims.input(),
                dims.state
            )));
        }
        let net = Mlp::from_params(&sizes, params)?;
        Ok(Self { dims, net, seed })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn layer_sizes(&self) -> &[usize] {
        self.net.sizes()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        self.net.layer_mut(layer)
    }

    pub(crate) fn assemble_input(
        &self,
        xt: &[f64],
        t: f64,
        cond: &[f64],
        speaker: &[f64],
    ) -> Result<Vec<f64>, FlowError> {
        let d = self.dims;
        for (what, expected, found) in [
            ("state", d.state, xt.len()),
            ("conditioning", d.cond, cond.len()),
            ("speaker embedding", d.speaker, speaker.len()),
        ] {
            if expected != found {
                return Err(FlowError::ShapeMismatch {
                    what,
                    expected,
                    found,
                });
            }
        }
        let mut input = Vec::with_capacity(d.input());
        input.extend_from_slice(xt);
        input.push(t);
        input.extend_from_slice(cond);
        input.extend_from_slice(speaker);
        Ok(input)
    }
}

/// Velocity predicted at state `xt`, time `t`, with token conditioning
/// `cond` and speaker embedding `speaker`.
pub fn vf_forward(
    model: &VectorFieldModel,
    xt: &[f64],
    t: f64,
    cond: &[f64],
    speaker: &[f64],
) -> Result<Vec<f64>, FlowError> {
    let input = model.assemble_input(xt, t, cond, speaker)?;
    let out = model.net.forward(&input)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite("velocity"));
    }
    Ok(out)
}
