//! The two small dense networks and their optimizer.
//!
//! The density net maps hash features plus an expression code to a
//! 16-vector whose first channel is log-space density; the color net maps
//! that vector plus the SH view encoding to sigmoid RGB. Gradients are
//! exact reverse-mode over a recorded tape (the activation scratch of the
//! forward pass). Training uses bias-corrected Adam with an exponential
//! moving average of all weights; rendering reads the averaged copy.

use crate::scalar::Scalar;
use rand::Rng;
use thiserror::Error;

/// Width of the expression conditioning vector.
pub const EXPRESSION_DIM: usize = 16;
/// Width of the density net output (channel 0 is log density).
pub const SIGMA_FEATURES: usize = 16;
/// Hidden width of both networks.
pub const HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("tape does not match network layout")]
    TapeMismatch,
    #[error("non-finite gradient in tensor {tensor} at index {index}")]
    NonFiniteGradient { tensor: usize, index: usize },
}

/// 16-scalar conditioning vector; the constant code is all ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpressionCode(pub [f64; EXPRESSION_DIM]);

impl ExpressionCode {
    pub fn ones() -> Self {
        Self([1.0; EXPRESSION_DIM])
    }

    pub fn zeros() -> Self {
        Self([0.0; EXPRESSION_DIM])
    }

    pub fn as_scalars<S: Scalar>(&self) -> [S; EXPRESSION_DIM] {
        let mut out = [S::zero(); EXPRESSION_DIM];
        for (o, &v) in out.iter_mut().zip(&self.0) {
            *o = S::from_f64(v);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    /// Raw linear output.
    None,
    /// Elementwise logistic squash to (0, 1).
    Sigmoid,
}

/// Dense network with ReLU hidden layers. Parameters live in one flat
/// array, per layer `[W (out x in, row major), b]`.
#[derive(Debug, Clone)]
pub struct Mlp<S: Scalar> {
    dims: Vec<usize>,
    output_activation: OutputActivation,
    params: Vec<S>,
}

/// Activations recorded by a forward pass; doubles as the backward tape.
#[derive(Debug, Clone)]
pub struct MlpTape<S: Scalar> {
    /// `acts[0]` is the input; `acts[k]` the post-activation output of
    /// layer `k-1`.
    acts: Vec<Vec<S>>,
    dims: Vec<usize>,
}

impl<S: Scalar> MlpTape<S> {
    pub fn for_net(net: &Mlp<S>) -> Self {
        Self {
            acts: net.dims.iter().map(|&d| vec![S::zero(); d]).collect(),
            dims: net.dims.clone(),
        }
    }

    /// The input slot, for callers that assemble the input in place before
    /// [`Mlp::forward_prefilled`].
    pub fn input_mut(&mut self) -> &mut [S] {
        &mut self.acts[0]
    }

    pub fn output(&self) -> &[S] {
        self.acts.last().unwrap()
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Dot product with independent partial sums so the reduction vectorizes.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 8;
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let x = &a[c * LANES..(c + 1) * LANES];
        let y = &b[c * LANES..(c + 1) * LANES];
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = S::zero();
    for k in chunks * LANES..a.len() {
        tail += a[k] * b[k];
    }
    let mut total = tail;
    for v in acc {
        total += v;
    }
    total
}

impl<S: Scalar> Mlp<S> {
    /// Xavier-uniform weights, zero biases.
    pub fn new(dims: Vec<usize>, output_activation: OutputActivation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut params = vec![S::zero(); param_count(&dims)];
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in params[offset..offset + fan_in * fan_out].iter_mut() {
                *p = S::from_f64(rng.random_range(-bound..=bound));
            }
            offset += fan_in * fan_out + fan_out;
        }
        Self {
            dims,
            output_activation,
            params,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[S]) {
        assert_eq!(params.len(), self.params.len());
        self.params.copy_from_slice(params);
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize, usize, usize) {
        let mut offset = 0;
        for l in 0..layer {
            offset += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        let (fan_in, fan_out) = (self.dims[layer], self.dims[layer + 1]);
        (offset, offset + fan_in * fan_out, fan_in, fan_out)
    }

    /// Rescales one layer's weight matrix (initialization shaping).
    pub fn scale_layer_weights(&mut self, layer: usize, factor: f64) {
        let (w_off, b_off, _, _) = self.layer_offsets(layer);
        let f = S::from_f64(factor);
        for p in self.params[w_off..b_off].iter_mut() {
            *p *= f;
        }
    }

    /// Sets one bias value (initialization shaping).
    pub fn set_bias(&mut self, layer: usize, unit: usize, value: f64) {
        let (_, b_off, _, fan_out) = self.layer_offsets(layer);
        assert!(unit < fan_out);
        self.params[b_off + unit] = S::from_f64(value);
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    /// Forward pass recording all activations into `tape`.
    pub fn forward_tape(&self, input: &[S], tape: &mut MlpTape<S>) -> Result<(), NetworkError> {
        if input.len() != self.input_dim() {
            return Err(NetworkError::ShapeMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        if tape.dims != self.dims {
            return Err(NetworkError::TapeMismatch);
        }
        tape.acts[0].copy_from_slice(input);
        self.forward_prefilled(tape)
    }

    /// Forward pass assuming the caller already wrote the input into
    /// `tape.input_mut()`.
    pub fn forward_prefilled(&self, tape: &mut MlpTape<S>) -> Result<(), NetworkError> {
        if tape.dims != self.dims {
            return Err(NetworkError::TapeMismatch);
        }
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(l);
            let (before, after) = tape.acts.split_at_mut(l + 1);
            let a = before[l].as_slice();
            let z = after[0].as_mut_slice();
            for i in 0..fan_out {
                let row = &self.params[w_off + i * fan_in..w_off + (i + 1) * fan_in];
                z[i] = self.params[b_off + i] + dot(row, a);
            }
            if l + 1 < layers {
                for v in z.iter_mut() {
                    if *v < S::zero() {
                        *v = S::zero();
                    }
                }
            } else {
                match self.output_activation {
                    OutputActivation::None => {}
                    OutputActivation::Sigmoid => {
                        for v in z.iter_mut() {
                            *v = S::one() / (S::one() + (-*v).exp());
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Allocation-friendly forward for one-off calls.
    pub fn forward(&self, input: &[S]) -> Result<Vec<S>, NetworkError> {
        let mut tape = MlpTape::for_net(self);
        self.forward_tape(input, &mut tape)?;
        Ok(tape.output().to_vec())
    }

    /// Reverse-mode pass over a recorded tape. `upstream` is the gradient
    /// at the (post-activation) output. Parameter gradients are accumulated
    /// into `grads` (same flat layout as the parameters); the gradient at
    /// the input is written to `d_input`.
    pub fn backward_tape(
        &self,
        tape: &MlpTape<S>,
        upstream: &[S],
        grads: &mut [S],
        d_input: &mut [S],
    ) -> Result<(), NetworkError> {
        if tape.dims != self.dims {
            return Err(NetworkError::TapeMismatch);
        }
        if upstream.len() != self.output_dim() {
            return Err(NetworkError::ShapeMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if grads.len() != self.params.len() || d_input.len() != self.input_dim() {
            return Err(NetworkError::ShapeMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let layers = self.dims.len() - 1;
        let mut dz: Vec<S> = upstream.to_vec();
        match self.output_activation {
            OutputActivation::None => {}
            OutputActivation::Sigmoid => {
                for (d, &y) in dz.iter_mut().zip(tape.acts[layers].iter()) {
                    *d *= y * (S::one() - y);
                }
            }
        }
        let mut da: Vec<S> = Vec::new();
        for l in (0..layers).rev() {
            let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(l);
            let a = &tape.acts[l];
            da.clear();
            da.resize(fan_in, S::zero());
            for i in 0..fan_out {
                let d = dz[i];
                grads[b_off + i] += d;
                if d == S::zero() {
                    continue;
                }
                let row = &self.params[w_off + i * fan_in..w_off + (i + 1) * fan_in];
                let grow = &mut grads[w_off + i * fan_in..w_off + (i + 1) * fan_in];
                for j in 0..fan_in {
                    grow[j] += d * a[j];
                }
                for (dj, wj) in da.iter_mut().zip(row) {
                    *dj += d * *wj;
                }
            }
            if l == 0 {
                d_input.copy_from_slice(&da);
            } else {
                // ReLU derivative from the stored post-activation.
                dz.clear();
                dz.extend(
                    da.iter()
                        .zip(tape.acts[l].iter())
                        .map(|(&g, &post)| if post > S::zero() { g } else { S::zero() }),
                );
            }
        }
        Ok(())
    }
}

/// Density network output: the raw 16 features and `exp(features[0])`.
#[derive(Debug, Clone)]
pub struct DensityOutput<S> {
    pub sigma_features: Vec<S>,
    pub density: S,
}

/// Runs the density net on hash features concatenated with the expression
/// code. Channel 0 of the output is log-space density.
pub fn density_forward<S: Scalar>(
    net: &Mlp<S>,
    hash_features: &[S],
    expression: &[S; EXPRESSION_DIM],
) -> Result<DensityOutput<S>, NetworkError> {
    let expected = net.input_dim();
    if hash_features.len() + EXPRESSION_DIM != expected {
        return Err(NetworkError::ShapeMismatch {
            expected,
            got: hash_features.len() + EXPRESSION_DIM,
        });
    }
    let mut input = Vec::with_capacity(expected);
    input.extend_from_slice(hash_features);
    input.extend_from_slice(expression);
    let features = net.forward(&input)?;
    let density = features[0].exp();
    Ok(DensityOutput {
        sigma_features: features,
        density,
    })
}

/// Runs the color net on density features concatenated with the view
/// encoding; output is sigmoid RGB.
pub fn color_forward<S: Scalar>(
    net: &Mlp<S>,
    sigma_features: &[S],
    dir_encoding: &[S],
) -> Result<[S; 3], NetworkError> {
    let expected = net.input_dim();
    if sigma_features.len() + dir_encoding.len() != expected {
        return Err(NetworkError::ShapeMismatch {
            expected,
            got: sigma_features.len() + dir_encoding.len(),
        });
    }
    let mut input = Vec::with_capacity(expected);
    input.extend_from_slice(sigma_features);
    input.extend_from_slice(dir_encoding);
    let out = net.forward(&input)?;
    Ok([out[0], out[1], out[2]])
}

/// Adam hyperparameters plus the weight-EMA decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub ema_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-15,
            ema_decay: 0.95,
        }
    }
}

/// Optimizer state for a list of parameter tensors: first/second moments
/// and the EMA shadow (initialized to the initial parameters; rendering and
/// eval read the shadow).
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    pub shadow: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(initial_params: &[&[S]], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: initial_params
                .iter()
                .map(|p| vec![S::zero(); p.len()])
                .collect(),
            v: initial_params
                .iter()
                .map(|p| vec![S::zero(); p.len()])
                .collect(),
            shadow: initial_params.iter().map(|p| p.to_vec()).collect(),
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.m.len()
    }

    pub fn moments(&self, tensor: usize) -> (&[S], &[S]) {
        (&self.m[tensor], &self.v[tensor])
    }

    /// Restores raw optimizer buffers (for checkpoint resume).
    pub fn restore(&mut self, tensor: usize, m: Vec<S>, v: Vec<S>, shadow: Vec<S>) {
        assert_eq!(m.len(), self.m[tensor].len());
        assert_eq!(v.len(), self.v[tensor].len());
        assert_eq!(shadow.len(), self.shadow[tensor].len());
        self.m[tensor] = m;
        self.v[tensor] = v;
        self.shadow[tensor] = shadow;
    }

    /// One bias-corrected Adam update over every tensor, then the EMA move
    /// `shadow <- decay*shadow + (1-decay)*params`.
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &[&[S]]) -> Result<(), NetworkError> {
        use rayon::prelude::*;
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        for (t, g) in grads.iter().enumerate() {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(NetworkError::NonFiniteGradient { tensor: t, index });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let cfg = self.config;
        let bias1 = S::from_f64(1.0 / (1.0 - cfg.beta1.powf(t)));
        let bias2 = S::from_f64(1.0 / (1.0 - cfg.beta2.powf(t)));
        let lr = S::from_f64(cfg.learning_rate);
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one_m_b1 = S::one() - b1;
        let one_m_b2 = S::one() - b2;
        let eps = S::from_f64(cfg.epsilon);
        let ema = S::from_f64(cfg.ema_decay);
        let one_m_ema = S::one() - ema;

        for (((p, g), (m, v)), s) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(self.shadow.iter_mut())
        {
            assert_eq!(p.len(), g.len());
            let update = |(((pv, gv), (mv, vv)), sv): (
                ((&mut S, &S), (&mut S, &mut S)),
                &mut S,
            )| {
                *mv = b1 * *mv + one_m_b1 * *gv;
                *vv = b2 * *vv + one_m_b2 * *gv * *gv;
                let m_hat = *mv * bias1;
                let v_hat = *vv * bias2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
                *sv = ema * *sv + one_m_ema * *pv;
            };
            if p.len() >= 1 << 16 {
                p.par_iter_mut()
                    .zip(g.par_iter())
                    .zip(m.par_iter_mut().zip(v.par_iter_mut()))
                    .zip(s.par_iter_mut())
                    .for_each(update);
            } else {
                p.iter_mut()
                    .zip(g.iter())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                    .zip(s.iter_mut())
                    .for_each(update);
            }
        }
        Ok(())
    }
}
