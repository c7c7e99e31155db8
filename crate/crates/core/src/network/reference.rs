use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dense, Layer, Model};
use crate::activations::{Activation, StepWiseConfig};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PoolMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    /// `(C, H, W)` of one sample.
    pub fn input_dims(self) -> (usize, usize, usize) {
        match self {
            Self::Mnist => (1, 28, 28),
            Self::Cifar10 => (3, 32, 32),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::Cifar10 => "cifar10",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "cifar10" => Ok(Self::Cifar10),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Activation placed right after the first convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FirstActivation {
    Plain(Activation),
    StepWise(StepWiseConfig),
}

impl FirstActivation {
    fn layer(self) -> Layer {
        match self {
            Self::Plain(a) => Layer::Activation(a),
            Self::StepWise(cfg) => Layer::StepWise(cfg),
        }
    }
}

impl fmt::Display for FirstActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Plain(a) => write!(f, "{a}"),
            Self::StepWise(cfg) => write!(f, "stepwise-n{}", cfg.n()),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a)).expect("static shape")
}

fn conv(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, s: usize, pad: usize) -> Layer {
    let w = uniform(rng, &[c_out, c_in, s, s], c_in * s * s, c_out);
    Layer::Conv(ConvSpec::without_bias(w, 1, pad).expect("static shape"))
}

fn dense(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Layer {
    let w = uniform(rng, &[out, inp], inp, out);
    Layer::Dense(Dense::new(w, vec![0.0; out]).expect("static shape"))
}

/// The desk-scale CNN:
///
/// ```text
/// conv(C->16, 5x5, pad 2) -> first activation -> maxpool 2
/// -> conv(16->32, 5x5, pad 2) -> relu -> maxpool 2
/// -> flatten -> dense(->128) -> relu -> dense(->10)
/// ```
///
/// Weights are drawn from `uniform(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`
/// where a convolution's fan-in spans its receptive field (`C_in * S * S`) and
/// its fan-out is `C_out`; biases start at zero.
pub fn build_reference_model(kind: DatasetKind, first: FirstActivation, seed: u64) -> Model {
    let (c, h, w) = kind.input_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = 32 * (h / 4) * (w / 4);
    Model::new(vec![
        conv(&mut rng, c, 16, 5, 2),
        first.layer(),
        Layer::Pool { window: 2, mode: PoolMode::Max },
        conv(&mut rng, 16, 32, 5, 2),
        Layer::Activation(Activation::Relu),
        Layer::Pool { window: 2, mode: PoolMode::Max },
        Layer::Flatten,
        dense(&mut rng, flat, 128),
        Layer::Activation(Activation::Relu),
        dense(&mut rng, 128, 10),
    ])
}
