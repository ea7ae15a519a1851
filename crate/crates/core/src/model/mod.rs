//! Desk-scale decoder-only transformer: five block variants sharing a
//! single-head attention sub-layer, a causal forward pass that records the
//! activations the patch computations need, and JSON weight files.

mod config;
mod forward;
pub mod io;
mod params;

pub use config::{ModelConfig, Variant};
pub use forward::{
    attention_sublayer, block_forward, embed_token, gated_hidden, logits_from_hidden, mlp_branch,
    mlp_sublayer, model_forward, ContextStates, ForwardOutput, LayerTrace, MlpTrace,
};
pub use params::{
    gen_random_model, AttnParams, BlockParams, GatedMlp, GemmaMlp, LlamaMlp, Mlp, ModelParams,
    MoeMlp, ParamMut, ParamRef, Tensor, VanillaMlp,
};
