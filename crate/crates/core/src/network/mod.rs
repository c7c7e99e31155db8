//! A small reverse-mode training engine over a fixed sequence of layers.
//!
//! The model's loss head is always softmax cross-entropy averaged over the
//! batch; [`Model::forward`] returns logits and a [`Tape`] that
//! [`Model::backward`] consumes.

mod checkpoint;
mod reference;
mod train;

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::activations::{step_wise, Activation, StepWiseConfig};
use crate::error::{Error, Result};
use crate::tensor::{self, gemm, pool2d_indexed, rm, tr, ConvGeom, ConvSpec, PoolMode, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use reference::{build_reference_model, DatasetKind, FirstActivation};
pub use train::{
    epoch_batches, evaluate, sgd_momentum_step, train_epochs, EpochStats, GradientMode,
    TrainConfig, Velocity,
};

/// Fully connected layer, `y = x W^T + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        let [out, _] = weights.dims2()?;
        if bias.len() != out {
            return Err(Error::Dimension(format!("dense bias {} != out {out}", bias.len())));
        }
        Ok(Self { weights, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// Layer kinds. The softmax cross-entropy head is implicit at the end of
/// every [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Pool,
    Dense,
    Activation,
    StepWise,
    Flatten,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvSpec),
    Pool { window: usize, mode: PoolMode },
    Dense(Dense),
    Activation(Activation),
    StepWise(StepWiseConfig),
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Self::Conv(_) => LayerKind::Conv,
            Self::Pool { .. } => LayerKind::Pool,
            Self::Dense(_) => LayerKind::Dense,
            Self::Activation(_) => LayerKind::Activation,
            Self::StepWise(_) => LayerKind::StepWise,
            Self::Flatten => LayerKind::Flatten,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Self::Conv(_) | Self::Dense(_))
    }

    /// `(weights, bias)` of a parametric layer.
    pub fn params(&self) -> Option<(&Tensor, &[f64])> {
        match self {
            Self::Conv(spec) => Some((spec.weights(), spec.bias())),
            Self::Dense(d) => Some((&d.weights, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut [f64])> {
        match self {
            Self::Conv(spec) => {
                // Two disjoint borrows of the spec.
                let spec: *mut ConvSpec = spec;
                // SAFETY: weights and bias are distinct fields of the same spec.
                unsafe { Some(((*spec).weights_mut(), (*spec).bias_mut())) }
            }
            Self::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            _ => None,
        }
    }

    /// Architecture description without parameter values.
    pub fn describe(&self) -> String {
        match self {
            Self::Conv(s) => format!(
                "conv(out={},in={},k={},stride={},pad={})",
                s.out_channels(),
                s.in_channels(),
                s.kernel_size(),
                s.stride(),
                s.padding()
            ),
            Self::Pool { window, mode } => format!("pool({mode:?},{window})").to_lowercase(),
            Self::Dense(d) => format!("dense(out={},in={})", d.out_features(), d.in_features()),
            Self::Activation(a) => a.name().to_string(),
            Self::StepWise(c) => format!("stepwise({},n={},v={})", c.base(), c.n(), c.v()),
            Self::Flatten => "flatten".into(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let dims4 = || -> Result<[usize; 4]> {
            match *input {
                [n, c, h, w] => Ok([n, c, h, w]),
                _ => Err(Error::Dimension(format!("expected (N,C,H,W), got {input:?}"))),
            }
        };
        match self {
            Self::Conv(spec) => Ok(spec.output_shape(input)?.to_vec()),
            Self::Pool { window, .. } => {
                let [n, c, h, w] = dims4()?;
                if *window == 0 || h % window != 0 || w % window != 0 {
                    return Err(Error::Dimension(format!("pool window {window} must divide {h}x{w}")));
                }
                Ok(vec![n, c, h / window, w / window])
            }
            Self::Dense(d) => match *input {
                [n, f] if f == d.in_features() => Ok(vec![n, d.out_features()]),
                _ => Err(Error::Dimension(format!(
                    "dense expects (N,{}), got {input:?}",
                    d.in_features()
                ))),
            },
            Self::Flatten => Ok(vec![input[0], input[1..].iter().product()]),
            Self::Activation(_) | Self::StepWise(_) => Ok(input.to_vec()),
        }
    }
}

/// Per-layer forward record needed by the backward pass.
#[derive(Debug, Clone)]
enum Cache {
    /// Input shape and the im2col buffer of every sample.
    Conv { input_shape: Vec<usize>, cols: Vec<f64> },
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Dense { input: Tensor },
    Pointwise { input: Tensor },
    Flatten { input_shape: Vec<usize> },
    /// Layer sits before a frozen boundary; nothing recorded.
    Skipped,
}

/// Activation record of a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
    logits: Tensor,
    /// First layer whose parameters receive gradients.
    trainable_from: usize,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

/// Gradient of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// One entry per layer; `None` for parameter-free or frozen layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub per_layer: Vec<Option<LayerGrad>>,
    /// Gradient of the loss with respect to the model input, when requested.
    pub input: Option<Tensor>,
}

/// An ordered stack of layers with an implicit softmax cross-entropy head.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Model {
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Index of the first step-wise layer, if any.
    pub fn first_stepwise(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, Layer::StepWise(_)))
    }

    /// Splits into `(prefix, suffix)` with the prefix holding layers `..at`.
    pub fn split_at(mut self, at: usize) -> (Model, Model) {
        let suffix = self.layers.split_off(at.min(self.layers.len()));
        (self, Model { layers: suffix })
    }

    /// Layers up to and including the first step-wise layer form the edge
    /// side; the rest is trained remotely.
    pub fn split_at_stepwise(self) -> Result<(Model, Model)> {
        let idx = self
            .first_stepwise()
            .ok_or_else(|| Error::Config("model has no step-wise layer to split at".into()))?;
        Ok(self.split_at(idx + 1))
    }

    pub fn concat(mut self, other: Model) -> Model {
        self.layers.extend(other.layers);
        self
    }

    /// Canonical architecture description, one layer per line.
    pub fn architecture(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let _ = writeln!(s, "{}", l.describe());
        }
        s
    }

    /// SHA-256 of [`architecture`](Self::architecture), hex encoded.
    pub fn architecture_hash(&self) -> String {
        let digest = Sha256::digest(self.architecture().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that `input_shape` flows through every layer.
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input_shape.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            shape = l.output_shape(&shape).map_err(|e| at_layer(i, e))?;
        }
        Ok(shape)
    }

    /// Inference only.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = forward_layer(layer, &x, false).map_err(|e| at_layer(i, e))?.0;
        }
        Ok(x)
    }

    /// Forward pass recording what backward needs. Layers before
    /// `trainable_from` are evaluated without recording.
    pub fn forward(&self, input: &Tensor, mode: GradientMode) -> Result<(Tensor, Tape)> {
        let trainable_from = self.trainable_from(mode);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) =
                forward_layer(layer, &x, i >= trainable_from).map_err(|e| at_layer(i, e))?;
            caches.push(cache);
            x = y;
        }
        let tape = Tape { caches, logits: x.clone(), trainable_from };
        Ok((x, tape))
    }

    /// First layer that gets gradients under `mode`.
    pub fn trainable_from(&self, mode: GradientMode) -> usize {
        match (mode, self.first_stepwise()) {
            (GradientMode::FrozenPrefix, Some(i)) => i + 1,
            _ => 0,
        }
    }

    /// Softmax cross-entropy loss and gradients for every trainable
    /// parameter. With `want_input_grad`, also returns the gradient with
    /// respect to the model input (only meaningful when nothing is frozen).
    pub fn backward(&self, tape: &Tape, labels: &[usize], want_input_grad: bool) -> Result<Gradients> {
        let (loss, grad) = softmax_cross_entropy(&tape.logits, labels)?;
        let mut grads = self.backward_from(tape, grad, want_input_grad)?;
        grads.loss = loss;
        Ok(grads)
    }

    /// Backward pass seeded with the gradient of some external loss with
    /// respect to this model's output. `loss` is reported as 0.
    pub fn backward_from(&self, tape: &Tape, output_grad: Tensor, want_input_grad: bool) -> Result<Gradients> {
        if output_grad.shape() != tape.logits.shape() {
            return Err(Error::Dimension(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                tape.logits.shape()
            )));
        }
        let mut grad = output_grad;
        let mut per_layer = vec![None; self.layers.len()];
        let stop = tape.trainable_from;
        for i in (stop..self.layers.len()).rev() {
            let need_input = i > stop || want_input_grad;
            let (g_in, g_params) = backward_layer(&self.layers[i], &tape.caches[i], &grad, need_input)
                .map_err(|e| at_layer(i, e))?;
            per_layer[i] = g_params;
            match g_in {
                Some(g) => grad = g,
                None => break,
            }
        }
        let input = (want_input_grad && (stop == 0 || self.layers.is_empty())).then_some(grad);
        Ok(Gradients { loss: 0.0, per_layer, input })
    }
}

fn at_layer(layer: usize, e: Error) -> Error {
    match e {
        Error::Dimension(message) => Error::LayerDimension { layer, message },
        other => other,
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!("label {bad} outside 0..{k}")));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (j, g) in grad[b * k..(b + 1) * k].iter_mut().enumerate() {
            *g = (row[j] - log_z).exp() * inv_n;
        }
        grad[b * k + label] -= inv_n;
    }
    Ok((loss * inv_n, Tensor::from_parts(vec![n, k], grad)))
}

fn forward_layer(layer: &Layer, x: &Tensor, record: bool) -> Result<(Tensor, Cache)> {
    Ok(match layer {
        Layer::Conv(spec) => {
            if !record {
                (tensor::conv2d(x, spec)?, Cache::Skipped)
            } else {
                let geom = ConvGeom::new(spec, x.shape())?;
                let n = x.shape()[0];
                let (k, p) = (geom.patch_len(), geom.out_len());
                let c_out = spec.out_channels();
                let mut cols = vec![0.0; n * k * p];
                let mut out = vec![0.0; n * c_out * p];
                for b in 0..n {
                    let col = &mut cols[b * k * p..(b + 1) * k * p];
                    geom.im2col(&x.data()[b * geom.in_len()..(b + 1) * geom.in_len()], col);
                    let dst = &mut out[b * c_out * p..(b + 1) * c_out * p];
                    for (o, chunk) in dst.chunks_mut(p).enumerate() {
                        chunk.fill(spec.bias()[o]);
                    }
                    gemm(c_out, k, p, 1.0, spec.weights().data(), rm(k), col, rm(p), 1.0, dst, rm(p));
                }
                let y = Tensor::from_parts(vec![n, c_out, geom.h_out, geom.w_out], out);
                (y, Cache::Conv { input_shape: x.shape().to_vec(), cols })
            }
        }
        Layer::Pool { window, mode } => {
            let (y, argmax) = pool2d_indexed(x, *window, *mode)?;
            let cache = if record {
                Cache::Pool { input_shape: x.shape().to_vec(), argmax }
            } else {
                Cache::Skipped
            };
            (y, cache)
        }
        Layer::Dense(d) => {
            let [n, f] = x.dims2()?;
            if f != d.in_features() {
                return Err(Error::Dimension(format!("dense expects {} features, got {f}", d.in_features())));
            }
            let out_f = d.out_features();
            let mut y = Vec::with_capacity(n * out_f);
            for _ in 0..n {
                y.extend_from_slice(&d.bias);
            }
            gemm(n, f, out_f, 1.0, x.data(), rm(f), d.weights.data(), tr(f), 1.0, &mut y, rm(out_f));
            let cache = if record { Cache::Dense { input: x.clone() } } else { Cache::Skipped };
            (Tensor::from_parts(vec![n, out_f], y), cache)
        }
        Layer::Activation(a) => {
            let y = x.map(|z| a.apply(z));
            (y, if record { Cache::Pointwise { input: x.clone() } } else { Cache::Skipped })
        }
        Layer::StepWise(cfg) => {
            let y = x.map(|z| step_wise(z, cfg));
            (y, if record { Cache::Pointwise { input: x.clone() } } else { Cache::Skipped })
        }
        Layer::Flatten => {
            let shape = layer.output_shape(x.shape())?;
            let cache = if record { Cache::Flatten { input_shape: x.shape().to_vec() } } else { Cache::Skipped };
            (x.clone().reshape(shape)?, cache)
        }
    })
}

type LayerBackward = (Option<Tensor>, Option<LayerGrad>);

fn backward_layer(layer: &Layer, cache: &Cache, dy: &Tensor, need_input: bool) -> Result<LayerBackward> {
    let missing = || Error::Protocol("tape does not match the model".into());
    Ok(match (layer, cache) {
        (Layer::Conv(spec), Cache::Conv { input_shape, cols }) => {
            let geom = ConvGeom::new(spec, input_shape)?;
            let n = input_shape[0];
            let (k, p) = (geom.patch_len(), geom.out_len());
            let c_out = spec.out_channels();
            let mut dw = vec![0.0; c_out * k];
            let mut db = vec![0.0; c_out];
            let mut dx = if need_input { vec![0.0; n * geom.in_len()] } else { Vec::new() };
            let mut dcols = if need_input { vec![0.0; k * p] } else { Vec::new() };
            for b in 0..n {
                let g = &dy.data()[b * c_out * p..(b + 1) * c_out * p];
                let col = &cols[b * k * p..(b + 1) * k * p];
                // dW += dY_b (c_out x p) * cols_b^T (p x k)
                gemm(c_out, p, k, 1.0, g, rm(p), col, tr(p), 1.0, &mut dw, rm(k));
                for (o, row) in g.chunks(p).enumerate() {
                    db[o] += row.iter().sum::<f64>();
                }
                if need_input {
                    // dcols = W^T (k x c_out) * dY_b (c_out x p)
                    gemm(k, c_out, p, 1.0, spec.weights().data(), tr(k), g, rm(p), 0.0, &mut dcols, rm(p));
                    geom.col2im(&dcols, &mut dx[b * geom.in_len()..(b + 1) * geom.in_len()]);
                }
            }
            let grad = LayerGrad { weights: Tensor::from_parts(spec.weights().shape().to_vec(), dw), bias: db };
            let dx = need_input.then(|| Tensor::from_parts(input_shape.clone(), dx));
            (dx, Some(grad))
        }
        (Layer::Pool { window, mode }, Cache::Pool { input_shape, argmax }) => {
            if !need_input {
                return Ok((None, None));
            }
            let mut dx = vec![0.0; input_shape.iter().product()];
            match mode {
                PoolMode::Max => {
                    for (g, &idx) in dy.data().iter().zip(argmax) {
                        dx[idx] += g;
                    }
                }
                PoolMode::Average => {
                    let [_, _, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
                    let (ho, wo) = (h / window, w / window);
                    let area = (window * window) as f64;
                    for (o, g) in dy.data().iter().enumerate() {
                        let plane = o / (ho * wo);
                        let (oh, ow) = ((o % (ho * wo)) / wo, o % wo);
                        for i in 0..*window {
                            for j in 0..*window {
                                dx[plane * h * w + (oh * window + i) * w + ow * window + j] += g / area;
                            }
                        }
                    }
                }
            }
            (Some(Tensor::from_parts(input_shape.clone(), dx)), None)
        }
        (Layer::Dense(d), Cache::Dense { input }) => {
            let [n, f] = input.dims2()?;
            let out_f = d.out_features();
            let mut dw = vec![0.0; out_f * f];
            // dW = dY^T (out x n) * X (n x f)
            gemm(out_f, n, f, 1.0, dy.data(), tr(out_f), input.data(), rm(f), 0.0, &mut dw, rm(f));
            let mut db = vec![0.0; out_f];
            for row in dy.data().chunks(out_f) {
                for (acc, g) in db.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            let dx = need_input.then(|| {
                let mut dx = vec![0.0; n * f];
                gemm(n, out_f, f, 1.0, dy.data(), rm(out_f), d.weights.data(), rm(f), 0.0, &mut dx, rm(f));
                Tensor::from_parts(vec![n, f], dx)
            });
            (dx, Some(LayerGrad { weights: Tensor::from_parts(vec![out_f, f], dw), bias: db }))
        }
        (Layer::Activation(a), Cache::Pointwise { input }) => {
            (need_input.then(|| pointwise_grad(input, dy, |z| a.derivative(z))), None)
        }
        // Straight-through: the base activation's derivative at the
        // unquantized input.
        (Layer::StepWise(cfg), Cache::Pointwise { input }) => {
            let base = cfg.base();
            (need_input.then(|| pointwise_grad(input, dy, |z| base.derivative(z))), None)
        }
        (Layer::Flatten, Cache::Flatten { input_shape }) => {
            (need_input.then(|| dy.clone().reshape(input_shape.clone())).transpose()?, None)
        }
        _ => return Err(missing()),
    })
}

fn pointwise_grad(input: &Tensor, dy: &Tensor, d: impl Fn(f64) -> f64) -> Tensor {
    let data = input.data().iter().zip(dy.data()).map(|(&z, &g)| g * d(z)).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}
