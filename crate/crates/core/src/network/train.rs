use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, LayerGrad, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How gradients cross a step-wise layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GradientMode {
    /// Everything up to and including the first step-wise layer is frozen;
    /// backward stops there.
    #[default]
    FrozenPrefix,
    /// The step-wise layer passes the base activation's derivative at its
    /// unquantized input.
    StraightThrough,
}

impl GradientMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::FrozenPrefix => "frozen",
            Self::StraightThrough => "straight-through",
        }
    }
}

impl std::str::FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" | "frozen-prefix" => Ok(Self::FrozenPrefix),
            "straight-through" => Ok(Self::StraightThrough),
            other => Err(Error::Config(format!("unknown gradient mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    pub stepwise_gradient_mode: GradientMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            epochs: 5,
            seed: 42,
            stepwise_gradient_mode: GradientMode::FrozenPrefix,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub per_layer: Vec<Option<LayerGrad>>,
}

impl Velocity {
    pub fn zeros(model: &Model) -> Self {
        let per_layer = model
            .layers()
            .iter()
            .map(|l| {
                l.params().map(|(w, b)| LayerGrad {
                    weights: Tensor::from_parts(w.shape().to_vec(), vec![0.0; w.len()]),
                    bias: vec![0.0; b.len()],
                })
            })
            .collect();
        Self { per_layer }
    }
}

/// `v <- momentum * v - lr * g; theta <- theta + v` for every layer that has a
/// gradient. Layers without one are left untouched, velocity included.
pub fn sgd_momentum_step(model: &mut Model, grads: &Gradients, velocity: &mut Velocity, cfg: &TrainConfig) {
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    for ((layer, grad), vel) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.per_layer)
        .zip(&mut velocity.per_layer)
    {
        let (Some(grad), Some(vel), Some((w, b))) = (grad, vel, layer.params_mut()) else {
            continue;
        };
        let update = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v - lr * g;
                *p += *v;
            }
        };
        update(w.data_mut(), vel.weights.data_mut(), grad.weights.data());
        update(b, &mut vel.bias, &grad.bias);
    }
}

/// Shuffled mini-batches of sample indices for one epoch. Each epoch draws
/// from its own ChaCha stream so any epoch can be regenerated in isolation.
pub fn epoch_batches(num_samples: usize, batch_size: usize, seed: u64, epoch: u32) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(epoch));
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} samples", labels.len())));
    }
    const CHUNK: usize = 250;
    let mut correct = 0usize;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let logits = model.predict(&images.slice_batch(start, end)?)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels[start..end]) {
            // first maximum wins on ties
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_loss: f64,
}

/// Mini-batch SGD with momentum over `cfg.epochs` epochs. `on_epoch` sees the
/// model after every epoch.
pub fn train_epochs(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, EpochStats) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} samples", labels.len())));
    }
    let mut velocity = Velocity::zeros(model);
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(n, cfg.batch_size, cfg.seed, epoch);
        for idx in &batches {
            let x = images.select_batch(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (_, tape) = model.forward(&x, cfg.stepwise_gradient_mode)?;
            let grads = model.backward(&tape, &y, false)?;
            total += grads.loss;
            sgd_momentum_step(model, &grads, &mut velocity, cfg);
        }
        let stats = EpochStats { epoch, mean_loss: total / batches.len() as f64 };
        on_epoch(model, stats)?;
        log.push(stats);
    }
    Ok(log)
}
