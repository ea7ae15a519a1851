use serde::{Deserialize, Serialize};

use super::{DenseVector, Precision};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

/// `v / sqrt(mean(v²) + eps)`. The learned scale is applied by the caller.
pub fn rmsnorm(v: &DenseVector, eps: f64, p: Precision) -> Result<DenseVector> {
    if v.is_empty() {
        return Err(Error::DimensionMismatch {
            op: "rmsnorm",
            expected: 1,
            got: 0,
        });
    }
    if eps == 0.0 && v.is_zero() {
        return Err(Error::ZeroVector);
    }
    let denom = rms_denominator(v, eps, p);
    Ok(v.map(|x| p.div(x, denom)))
}

/// `sqrt(mean(v²) + eps)`; with `eps = 0` this is RMS(v).
pub fn rms_denominator(v: &DenseVector, eps: f64, p: Precision) -> f64 {
    let mean_sq = p.div(v.norm_sq(p), v.len() as f64);
    p.sqrt(p.add(mean_sq, eps))
}

pub fn rms(v: &DenseVector, p: Precision) -> f64 {
    rms_denominator(v, 0.0, p)
}

/// `rmsnorm(v) ⊙ scale`.
pub fn scaled_rmsnorm(
    v: &DenseVector,
    scale: &DenseVector,
    eps: f64,
    p: Precision,
) -> Result<DenseVector> {
    rmsnorm(v, eps, p)?.hadamard(scale, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluTanh,
    Silu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64, p: Precision) -> f64 {
        let y = match self {
            Activation::GeluTanh => {
                let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
        };
        p.round(y)
    }

    pub fn apply_vec(self, v: &DenseVector, p: Precision) -> DenseVector {
        v.map(|x| self.apply(x, p))
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gelu" | "gelu_tanh" => Ok(Activation::GeluTanh),
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation '{other}'")),
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax(v: &DenseVector, p: Precision) -> DenseVector {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = v.map(|x| p.exp(p.sub(x, max)));
    let total = p.sum(exps.as_slice());
    exps.map(|e| p.div(e, total))
}
