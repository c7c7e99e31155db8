//! Element-wise activations, their inverses, and the step-wise quantizer.
//!
//! The step-wise wrapper maps any input onto one of `2n + 1` quantized
//! arguments `k * v / n`, `k` in `[-n, n]`, and evaluates the base activation
//! there:
//!
//! ```text
//! step(x) = g(sign(x) * floor(min(|x|, v) / (v/n)) * (v/n))
//! ```
//!
//! with `sign(0) = +1`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Tolerance used to decide whether a value lies on a plateau or inside an
/// activation's range.
pub const PLATEAU_TOL: f64 = 1e-9;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `-ln(1/y - 1)`, defined on the open interval `(0, 1)`.
pub fn sigmoid_inverse(y: f64) -> Result<f64> {
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::Domain(format!("sigmoid inverse needs 0 < y < 1, got {y}")));
    }
    // ln(y) - ln(1 - y) == -ln(1/y - 1), with better cancellation near 1.
    Ok(y.ln() - (-y).ln_1p())
}

pub fn tanh(z: f64) -> f64 {
    z.tanh()
}

/// `(ln(1 + z) - ln(1 - z)) / 2`, defined on `(-1, 1)`.
pub fn tanh_inverse(z: f64) -> Result<f64> {
    if !(z > -1.0 && z < 1.0) {
        return Err(Error::Domain(format!("tanh inverse needs |z| < 1, got {z}")));
    }
    Ok((z.ln_1p() - (-z).ln_1p()) / 2.0)
}

pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

/// A base activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Sigmoid => sigmoid(z),
            Self::Tanh => tanh(z),
            Self::Relu => relu(z),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Self::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Exact inverse for the bijective activations. ReLU has none; its
    /// reversal is a row-selection procedure in the inversion module.
    pub fn inverse(self, y: f64) -> Result<f64> {
        match self {
            Self::Sigmoid => sigmoid_inverse(y),
            Self::Tanh => tanh_inverse(y),
            Self::Relu => Err(Error::Capability("relu has no pointwise inverse".into())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Relu => "relu",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Self::Sigmoid => 0,
            Self::Tanh => 1,
            Self::Relu => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Sigmoid),
            1 => Some(Self::Tanh),
            2 => Some(Self::Relu),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Parameters of the step-wise quantizer: base activation, interval count `n`
/// and clipping value `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepWiseConfig {
    base: Activation,
    n: u32,
    v: f64,
}

impl StepWiseConfig {
    pub fn new(base: Activation, n: u32, v: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("step-wise interval count n must be >= 1".into()));
        }
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Config(format!("step-wise clipping value must be > 0, got {v}")));
        }
        Ok(Self { base, n, v })
    }

    pub fn base(&self) -> Activation {
        self.base
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    /// Width of one interval, `v / n`.
    pub fn step_width(&self) -> f64 {
        self.v / f64::from(self.n)
    }

    /// Signed plateau index `k` in `[-n, n]` for input `x`.
    pub fn plateau_index(&self, x: f64) -> i64 {
        let w = self.step_width();
        let m = x.abs().min(self.v);
        let n = i64::from(self.n);
        if m >= self.v {
            return if x >= 0.0 { n } else { -n };
        }
        let mut k = ((m / w).floor() as i64).clamp(0, n);
        // Keep the floor consistent with the products `k * w` used as plateau
        // arguments, so exact multiples land on the higher plateau.
        if k < n && (k + 1) as f64 * w <= m {
            k += 1;
        } else if k > 0 && k as f64 * w > m {
            k -= 1;
        }
        if x >= 0.0 {
            k
        } else {
            -k
        }
    }

    /// Quantized argument `k * v / n`; the clipped plateaus `|k| == n` sit at
    /// exactly `v`.
    pub fn plateau_argument(&self, k: i64) -> f64 {
        let arg = if k.unsigned_abs() >= u64::from(self.n) {
            self.v
        } else {
            k.unsigned_abs() as f64 * self.step_width()
        };
        if k < 0 {
            -arg
        } else {
            arg
        }
    }

    /// Every distinct output value, ascending. `2n + 1` values for sigmoid
    /// and tanh; ReLU collapses all non-positive plateaus into one.
    pub fn image(&self) -> Vec<f64> {
        let n = i64::from(self.n);
        let mut out: Vec<f64> = (-n..=n)
            .map(|k| self.base.apply(self.plateau_argument(k)))
            .collect();
        out.dedup();
        out
    }

    pub fn contains(&self, y: f64) -> bool {
        self.nearest_plateau(y).is_some()
    }

    /// Plateau index whose output is within [`PLATEAU_TOL`] of `y`, choosing
    /// the closest when several qualify.
    fn nearest_plateau(&self, y: f64) -> Option<i64> {
        if !y.is_finite() {
            return None;
        }
        let n = i64::from(self.n);
        let lo = if self.base == Activation::Relu { 0 } else { -n };
        let value = |k: i64| self.base.apply(self.plateau_argument(k));
        // Plateau values are non-decreasing in k.
        let ks: Vec<i64> = (lo..=n).collect();
        let pos = ks.partition_point(|&k| value(k) < y);
        [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter_map(|i| ks.get(i).copied())
            .map(|k| (k, (value(k) - y).abs()))
            .filter(|&(_, d)| d <= PLATEAU_TOL)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }
}

impl fmt::Display for StepWiseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stepwise({}, n={}, v={})", self.base, self.n, self.v)
    }
}

/// Step-wise version of `cfg.base()`.
pub fn step_wise(x: f64, cfg: &StepWiseConfig) -> f64 {
    cfg.base.apply(cfg.plateau_argument(cfg.plateau_index(x)))
}

/// Best point estimate of the input that produced step-wise output `y`: the
/// midpoint of the plateau's input interval, `v` (with sign) for the clipped
/// plateaus, and the upper half-interval midpoint `v / 2n` for plateau zero.
/// ReLU's collapsed non-positive plateau maps to `0`.
pub fn step_wise_pseudo_inverse(y: f64, cfg: &StepWiseConfig) -> Result<f64> {
    let k = cfg.nearest_plateau(y).ok_or(Error::NotAPlateau(y))?;
    let n = i64::from(cfg.n);
    let w = cfg.step_width();
    Ok(match k {
        0 if cfg.base == Activation::Relu => 0.0,
        0 => w / 2.0,
        k if k == n => cfg.v,
        k if k == -n => -cfg.v,
        k if k > 0 => cfg.plateau_argument(k) + w / 2.0,
        k => cfg.plateau_argument(k) - w / 2.0,
    })
}
