//! Implicit weight patches.
//!
//! A patch is a set of additive, token-dependent parameter deltas that make a
//! block evaluated without context reproduce the same block evaluated with
//! context. `block` holds the per-variant single-block patchers and
//! `multilayer` chains them through a whole model.

mod block;
mod multilayer;
mod primitives;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use block::{block_patch, gemma_block_patch_naive, gemma_block_patch_stable};
pub use multilayer::{multilayer_patch, LayerDiagnostics, PatchDiagnostics, PatchOutcome};
pub use primitives::{input_patch, output_bias_patch, output_scale_patch, output_weight_patch};

use crate::error::{Error, Result};
use crate::model::io::{Role, TensorRecord, WeightFile};
use crate::model::{attention_sublayer, AttnParams, BlockParams, ModelConfig, ModelParams, Tensor};
use crate::numerics::{DenseMatrix, DenseVector, Precision};

/// Deltas for one block, keyed by block-local parameter name.
pub type LayerPatch = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    /// Exact Gemma update: rank-1 gate/up patches and `Δm = ΔA ⊘ h`.
    #[default]
    Naive,
    /// Routes most of the correction through `W_down` by inverting the inner
    /// RMSNorm, leaving a small remainder for `Δm`.
    Stable,
}

impl PatchMode {
    pub fn name(self) -> &'static str {
        match self {
            PatchMode::Naive => "naive",
            PatchMode::Stable => "stable",
        }
    }
}

impl std::str::FromStr for PatchMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "naive" => Ok(PatchMode::Naive),
            "stable" => Ok(PatchMode::Stable),
            _ => Err(format!("unknown patch mode '{s}' (expected naive or stable)")),
        }
    }
}

impl std::fmt::Display for PatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Activations with `|h_i| ≤ tau` are treated as zero by the scale patch.
pub fn default_tau(p: Precision) -> f64 {
    match p {
        Precision::Float64 => 0.0,
        Precision::Float32 | Precision::Bf16Emulated => 1e-20,
    }
}

/// Largest accepted per-layer reconstruction error. Reduced precisions are
/// not checked by default.
pub fn default_residual_bound(p: Precision) -> f64 {
    match p {
        Precision::Float64 => 1e-6,
        Precision::Float32 | Precision::Bf16Emulated => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PatchOptions {
    pub mode: PatchMode,
    /// `None` picks [`default_tau`] for the model precision.
    pub tau: Option<f64>,
    /// `None` picks [`default_residual_bound`].
    pub residual_bound: Option<f64>,
}

impl PatchOptions {
    pub fn new(mode: PatchMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn tau_for(&self, p: Precision) -> f64 {
        self.tau.unwrap_or_else(|| default_tau(p))
    }

    pub fn bound_for(&self, p: Precision) -> f64 {
        self.residual_bound.unwrap_or_else(|| default_residual_bound(p))
    }
}

/// Post-attention states of one position with and without its context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextDelta {
    /// Block input `x`. The parallel variant's MLP reads it directly.
    pub input: DenseVector,
    /// `A(x)`, attention over `x` alone.
    pub v: DenseVector,
    /// `A(C, x)`, attention with the full context.
    pub v_c: DenseVector,
    /// `v_c − v`.
    pub delta: DenseVector,
}

impl ContextDelta {
    pub fn new(input: DenseVector, v: DenseVector, v_c: DenseVector, p: Precision) -> Result<Self> {
        let delta = v_c.sub(&v, p)?;
        Ok(Self { input, v, v_c, delta })
    }

    pub fn from_context(attn: &AttnParams, ctx: &[DenseVector], x: &DenseVector, cfg: &ModelConfig) -> Result<Self> {
        let v = attention_sublayer(attn, &[], x, cfg)?;
        let v_c = attention_sublayer(attn, ctx, x, cfg)?;
        Self::new(x.clone(), v, v_c, cfg.precision)
    }

    /// True when the context left the attention output bitwise unchanged.
    pub fn is_trivial(&self) -> bool {
        self.v.iter().zip(self.v_c.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Per-layer deltas for a whole model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchSet {
    pub layers: Vec<LayerPatch>,
}

/// `θ ← round_p(θ + Δ)` for each delta of one block.
pub fn apply_layer(block: &mut BlockParams, patch: &LayerPatch, p: Precision) -> Result<()> {
    for (name, delta) in patch {
        let mut param = block.param_mut(name).ok_or_else(|| Error::Parameter {
            name: name.clone(),
            reason: "not a parameter of this block".into(),
        })?;
        param.add_delta(name, delta, p)?;
    }
    Ok(())
}

impl PatchSet {
    pub fn empty(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerPatch::new(); n_layers],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flat_map(|l| l.values()).all(Tensor::is_zero)
    }

    pub fn get(&self, layer: usize, name: &str) -> Option<&Tensor> {
        self.layers.get(layer)?.get(name)
    }

    /// `max |Δ|` of one parameter, zero when it is not patched.
    pub fn max_abs(&self, layer: usize, name: &str) -> f64 {
        self.get(layer, name).map_or(0.0, Tensor::max_abs)
    }

    pub fn negated(&self) -> PatchSet {
        PatchSet {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|(n, t)| (n.clone(), t.negated())).collect())
                .collect(),
        }
    }

    fn check_layers(&self, model: &ModelParams) -> Result<()> {
        if self.layers.len() != model.blocks.len() {
            return Err(Error::Validation(format!(
                "patch has {} layers, model has {}",
                self.layers.len(),
                model.blocks.len()
            )));
        }
        Ok(())
    }

    /// Adds every delta in place, rounding to the model precision.
    pub fn apply(&self, model: &mut ModelParams) -> Result<()> {
        self.check_layers(model)?;
        let p = model.config.precision;
        for (l, (block, patch)) in model.blocks.iter_mut().zip(&self.layers).enumerate() {
            apply_layer(block, patch, p).map_err(|e| e.in_layer(l))?;
        }
        Ok(())
    }

    /// Subtracts every delta in place. This undoes [`PatchSet::apply`]
    /// exactly only when the additions were exact; use
    /// [`PatchSet::patched`] to keep the original untouched.
    pub fn unapply(&self, model: &mut ModelParams) -> Result<()> {
        self.negated().apply(model)
    }

    pub fn patched(&self, model: &ModelParams) -> Result<ModelParams> {
        let mut out = model.clone();
        self.apply(&mut out)?;
        Ok(out)
    }

    pub fn to_weight_file(&self, config: &ModelConfig) -> WeightFile {
        let mut file = WeightFile::new(Role::Delta, config.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer {
                let rec = TensorRecord {
                    shape: t.shape(),
                    data: t.data().to_vec(),
                };
                file.tensors.insert(format!("blocks.{l}.{name}"), rec);
            }
        }
        file
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        file.check_header(Role::Delta)?;
        let mut set = PatchSet::empty(file.config.n_layers);
        for (full, rec) in &file.tensors {
            let bad = |reason: &str| Error::Parameter {
                name: full.clone(),
                reason: reason.to_string(),
            };
            let (layer, name) = full
                .strip_prefix("blocks.")
                .and_then(|rest| rest.split_once('.'))
                .ok_or_else(|| bad("patch entries must be named blocks.<layer>.<param>"))?;
            let layer: usize = layer.parse().map_err(|_| bad("layer index is not a number"))?;
            if layer >= set.layers.len() {
                return Err(bad("layer index out of range"));
            }
            let tensor = match rec.shape[..] {
                [n] => Tensor::Vector(DenseVector::new(rec.data.clone())).check_len(n),
                [r, c] => DenseMatrix::new(r, c, rec.data.clone()).map(Tensor::Matrix),
                _ => return Err(bad("tensors must be vectors or matrices")),
            }
            .map_err(|e| bad(&e.to_string()))?;
            set.layers[layer].insert(name.to_string(), tensor);
        }
        Ok(set)
    }

    pub fn save(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        self.to_weight_file(config).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&WeightFile::read(path)?)
    }
}

impl Tensor {
    fn check_len(self, n: usize) -> Result<Tensor> {
        crate::error::check_len("tensor data", n, self.data().len())?;
        Ok(self)
    }
}
