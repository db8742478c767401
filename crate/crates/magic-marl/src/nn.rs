//! Minimal dense-network substrate: multilayer perceptrons with explicit
//! forward/backward passes and a bias-corrected Adam optimizer.
//!
//! Everything is `f64` and allocation is kept to whole-batch arrays; batched
//! passes go through `ndarray::dot` so the hot paths run as matrix products.
//! There is no autograd: [`Mlp::backward`] returns exact analytic gradients of
//! `upstream · output` with respect to every parameter and the input.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// Per-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed in terms of the layer *output* value.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        }
    }
}

/// One dense layer: `y = act(W x + b)` with `W` stored row-major `(out, in)`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// A feed-forward network of dense layers with chained dimensions.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer activations of a forward pass, kept for the backward pass.
/// `activations[0]` is the input batch, `activations[L]` the output batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace is never empty")
    }
}

/// Gradients matching an [`Mlp`]'s parameter shapes plus the input gradient.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub input: Array2<f64>,
}

impl Gradients {
    /// Euclidean norm over all parameter gradients (the input gradient is not
    /// a parameter and does not contribute).
    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for (w, b) in &self.layers {
            sq += w.iter().map(|v| v * v).sum::<f64>();
            sq += b.iter().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    /// Scales all parameter gradients so the global norm does not exceed
    /// `max_norm`. No-op when already within the bound.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for (w, b) in &mut self.layers {
                w.mapv_inplace(|v| v * scale);
                b.mapv_inplace(|v| v * scale);
            }
        }
    }
}

impl Mlp {
    /// Builds a network from `dims = [in, h1, ..., out]` with one activation
    /// per layer. Weights are initialized uniformly in `[-1/sqrt(fan_in),
    /// +1/sqrt(fan_in)]`, biases at zero.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(dims.len() - 1, activations.len(), "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(pair, &activation)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    rng.random_range(-bound..=bound)
                });
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Mlp { layers }
    }

    /// All-zero parameters; useful for tests and as an optimizer template.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Self {
        assert!(dims.len() >= 2);
        assert_eq!(dims.len() - 1, activations.len());
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(pair, &activation)| Layer {
                weights: Array2::zeros((pair[1], pair[0])),
                bias: Array1::zeros(pair[1]),
                activation,
            })
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer dims do not chain: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Shape(format!(
                "input length {} does not match first-layer in-dim {}",
                len,
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let mut current = input.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.out_dim()];
            for (o, out) in next.iter_mut().enumerate() {
                let row = layer.weights.row(o);
                let mut acc = layer.bias[o];
                for (w, x) in row.iter().zip(current.iter()) {
                    acc += w * x;
                }
                *out = layer.activation.apply(acc);
            }
            current = next;
        }
        Ok(current)
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(input)?.activations.pop_unwrap())
    }

    /// Batched forward pass that keeps per-layer activations for backprop.
    pub fn forward_trace(&self, input: ArrayView2<f64>) -> Result<ForwardTrace> {
        self.check_input(input.ncols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        for layer in &self.layers {
            let mut z = activations.last().unwrap().dot(&layer.weights.t());
            for mut row in z.rows_mut() {
                for (v, b) in row.iter_mut().zip(layer.bias.iter()) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            activations.push(z);
        }
        Ok(ForwardTrace { activations })
    }

    /// Backprop through a recorded trace. `upstream` is `dL/d(output)` with
    /// the same shape as the trace output; returns exact gradients for every
    /// parameter and the input batch.
    pub fn backward(&self, trace: &ForwardTrace, upstream: ArrayView2<f64>) -> Result<Gradients> {
        let out = trace.output();
        if upstream.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "upstream shape {:?} does not match output shape {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        let mut layer_grads = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); self.layers.len()];
        let mut delta = upstream.to_owned();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let output = &trace.activations[idx + 1];
            // delta <- upstream ⊙ act'(output)
            for (d, y) in delta.iter_mut().zip(output.iter()) {
                *d *= layer.activation.derivative_from_output(*y);
            }
            let prev = &trace.activations[idx];
            let grad_w = delta.t().dot(prev);
            let grad_b = delta.sum_axis(Axis(0));
            layer_grads[idx] = (grad_w, grad_b);
            delta = delta.dot(&layer.weights);
        }
        Ok(Gradients {
            layers: layer_grads,
            input: delta,
        })
    }

    /// Single-sample backward pass that recomputes the forward intermediates.
    pub fn backward_single(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients> {
        self.check_input(input.len())?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream length {} does not match out-dim {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("shape");
        let g = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("shape");
        let trace = self.forward_trace(x.view())?;
        self.backward(&trace, g.view())
    }

    /// Serializes to a flat little-endian record: `u32` layer count, then per
    /// layer `u32 in_dim`, `u32 out_dim`, `u8` activation tag, then per layer
    /// row-major weights followed by the bias.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            w.write_all(&(layer.in_dim() as u32).to_le_bytes())?;
            w.write_all(&(layer.out_dim() as u32).to_le_bytes())?;
            w.write_all(&[layer.activation.tag()])?;
        }
        for layer in &self.layers {
            for v in layer.weights.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in layer.bias.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        if count == 0 {
            return Err(Error::Checkpoint("snapshot has zero layers".into()));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let in_dim = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf)?;
            let out_dim = u32::from_le_bytes(u32buf) as usize;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            shapes.push((in_dim, out_dim, Activation::from_tag(tag[0])?));
        }
        let mut f64buf = [0u8; 8];
        let mut layers = Vec::with_capacity(count);
        for (in_dim, out_dim, activation) in shapes {
            let mut weights = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..in_dim * out_dim {
                r.read_exact(&mut f64buf)?;
                weights.push(f64::from_le_bytes(f64buf));
            }
            let mut bias = Vec::with_capacity(out_dim);
            for _ in 0..out_dim {
                r.read_exact(&mut f64buf)?;
                bias.push(f64::from_le_bytes(f64buf));
            }
            layers.push(Layer {
                weights: Array2::from_shape_vec((out_dim, in_dim), weights)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
                bias: Array1::from_vec(bias),
                activation,
            });
        }
        Mlp::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

trait PopUnwrap<T> {
    fn pop_unwrap(self) -> T;
}

impl<T> PopUnwrap<T> for Vec<T> {
    fn pop_unwrap(mut self) -> T {
        self.pop().expect("non-empty")
    }
}

/// Bias-corrected Adam state matching one network's parameter shapes.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(template: &Mlp) -> Self {
        let zeros = |mlp: &Mlp| {
            mlp.layers()
                .iter()
                .map(|l| {
                    (
                        Array2::zeros((l.out_dim(), l.in_dim())),
                        Array1::zeros(l.out_dim()),
                    )
                })
                .collect::<Vec<_>>()
        };
        Adam {
            m: zeros(template),
            v: zeros(template),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update applied in place.
    pub fn update(&mut self, params: &mut Mlp, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != params.layers().len() {
            return Err(Error::Shape("gradient layer count mismatch".into()));
        }
        if lr <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, layer) in params.layers_mut().iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[idx];
            if gw.shape() != layer.weights.shape() || gb.len() != layer.bias.len() {
                return Err(Error::Shape(format!("gradient shape mismatch in layer {idx}")));
            }
            let (mw, mb) = &mut self.m[idx];
            let (vw, vb) = &mut self.v[idx];
            azip_update(
                layer.weights.iter_mut(),
                mw.iter_mut(),
                vw.iter_mut(),
                gw.iter(),
                self.beta1,
                self.beta2,
                self.epsilon,
                lr,
                bc1,
                bc2,
            );
            azip_update(
                layer.bias.iter_mut(),
                mb.iter_mut(),
                vb.iter_mut(),
                gb.iter(),
                self.beta1,
                self.beta2,
                self.epsilon,
                lr,
                bc1,
                bc2,
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn azip_update<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    m: impl Iterator<Item = &'a mut f64>,
    v: impl Iterator<Item = &'a mut f64>,
    g: impl Iterator<Item = &'a f64>,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for (((p, m), v), g) in params.zip(m).zip(v).zip(g) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// `target <- tau * online + (1 - tau) * target`, elementwise over all layers.
pub fn polyak_blend(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if target.layers().len() != online.layers().len() {
        return Err(Error::Shape("target/online layer count mismatch".into()));
    }
    for (t, o) in target.layers_mut().iter_mut().zip(online.layers()) {
        if t.weights.shape() != o.weights.shape() {
            return Err(Error::Shape("target/online layer shape mismatch".into()));
        }
        for (tv, ov) in t.weights.iter_mut().zip(o.weights.iter()) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
        for (tv, ov) in t.bias.iter_mut().zip(o.bias.iter()) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}
