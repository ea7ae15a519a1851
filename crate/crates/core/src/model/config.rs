use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Precision, DEFAULT_EPS};

/// Block architecture. Every block of a model shares one variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Pre-norm GeGLU MLP followed by an inner RMSNorm and output scale `m`.
    Gemma,
    /// Pre-norm SwiGLU MLP with no post-norm.
    Llama,
    /// `W_2 act(W_1 v + b_1) + b_2`, no normalization.
    Vanilla,
    /// Attention and a Llama-shaped MLP both read the block input.
    Parallel,
    /// Dense softmax-routed mixture of Llama-shaped experts.
    Moe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Gemma,
        Variant::Llama,
        Variant::Vanilla,
        Variant::Parallel,
        Variant::Moe,
    ];

    pub fn default_activation(self) -> Activation {
        match self {
            Variant::Gemma | Variant::Vanilla => Activation::GeluTanh,
            Variant::Llama | Variant::Parallel | Variant::Moe => Activation::Silu,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gemma => "gemma",
            Variant::Llama => "llama",
            Variant::Vanilla => "vanilla",
            Variant::Parallel => "parallel",
            Variant::Moe => "moe",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant '{s}'"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub d_ff: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub n_layers: usize,
    /// Only read by the `moe` variant.
    pub n_experts: usize,
    pub eps: f64,
    pub activation: Activation,
    pub precision: Precision,
}

impl ModelConfig {
    /// `d_ff = 2 * d_model`, `head_dim = d_model`, two experts, default eps.
    pub fn new(variant: Variant, d_model: usize, n_layers: usize, vocab: usize) -> Self {
        Self {
            variant,
            d_model,
            d_ff: 2 * d_model,
            head_dim: d_model,
            vocab,
            n_layers,
            n_experts: 2,
            eps: DEFAULT_EPS,
            activation: variant.default_activation(),
            precision: Precision::Float64,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("head_dim", self.head_dim),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::InvalidConfig("vocab must be at least 2".into()));
        }
        if self.variant == Variant::Moe && self.n_experts == 0 {
            return Err(Error::InvalidConfig("moe needs at least one expert".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("eps must be a finite non-negative number, got {}", self.eps)));
        }
        Ok(())
    }
}
