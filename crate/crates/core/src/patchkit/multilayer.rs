//! Whole-model patching.
//!
//! One forward pass over context and query records every layer's input,
//! attention output and block output at the query position. Each layer is
//! then patched on its own: the recorded input is fed to attention without
//! context, the resulting `ContextDelta` is absorbed into the block, and the
//! recorded output becomes the next layer's input. The patched block is run
//! once more to check how closely it hits the recorded output.

use serde::Serialize;

use super::{apply_layer, block_patch, ContextDelta, PatchOptions, PatchSet};
use crate::error::{Error, Result};
use crate::model::{attention_sublayer, block_forward, model_forward, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    /// `‖v_C − v‖∞` of the attention output.
    pub delta_linf: f64,
    /// `‖patched block(x) − recorded output‖∞`.
    pub residual: f64,
    /// `max |Δ|` per patched parameter.
    pub patch_linf: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PatchDiagnostics {
    pub layers: Vec<LayerDiagnostics>,
}

impl PatchDiagnostics {
    pub fn max_residual(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, l| m.max(l.residual))
    }

    /// Largest `max |Δ|` of parameter `name` over all layers.
    pub fn max_patch(&self, name: &str) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.patch_linf.get(name))
            .fold(0.0, |m, &x| m.max(x))
    }
}

#[derive(Debug, Clone)]
pub struct PatchOutcome {
    pub model: ModelParams,
    pub patch: PatchSet,
    pub diagnostics: PatchDiagnostics,
}

/// Patches `model` so that running it on `query` alone reproduces running
/// the original on `context` followed by `query`.
pub fn multilayer_patch(model: &ModelParams, context: &[usize], query: usize, opts: &PatchOptions) -> Result<PatchOutcome> {
    let cfg = &model.config;
    let tau = opts.tau_for(cfg.precision);
    let bound = opts.bound_for(cfg.precision);

    let mut tokens = context.to_vec();
    tokens.push(query);
    let recorded = model_forward(model, &tokens)?;

    let mut patched = model.clone();
    let mut patch = PatchSet::empty(model.blocks.len());
    let mut diagnostics = PatchDiagnostics::default();
    for (l, trace) in recorded.traces.iter().enumerate() {
        let mut layer = || -> Result<LayerDiagnostics> {
            let block = &model.blocks[l];
            let v = attention_sublayer(&block.attn, &[], &trace.x_in, cfg)?;
            let cd = ContextDelta::new(trace.x_in.clone(), v, trace.v_attn.clone(), cfg.precision)?;
            let deltas = block_patch(block, &cd, cfg, opts.mode, tau)?;
            apply_layer(&mut patched.blocks[l], &deltas, cfg.precision)?;

            let (out, _) = block_forward(&patched.blocks[l], &[], &trace.x_in, cfg)?;
            let residual = out.linf_dist(&trace.x_out)?;
            if !(residual <= bound) {
                return Err(Error::LayerResidualExceeded { layer: l, residual, bound });
            }
            let diag = LayerDiagnostics {
                layer: l,
                delta_linf: cd.delta.max_abs(),
                residual,
                patch_linf: deltas.iter().map(|(n, t)| (n.clone(), t.max_abs())).collect(),
            };
            patch.layers[l] = deltas;
            Ok(diag)
        };
        diagnostics.layers.push(layer().map_err(|e| match e {
            e @ Error::LayerResidualExceeded { .. } => e,
            e => e.in_layer(l),
        })?);
    }
    Ok(PatchOutcome {
        model: patched,
        patch,
        diagnostics,
    })
}
