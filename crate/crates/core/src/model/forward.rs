use std::iter;

use super::params::{AttnParams, BlockParams, GatedMlp, Mlp};
use super::{ModelConfig, ModelParams};
use crate::error::{check_len, Error, Result};
use crate::numerics::{scaled_rmsnorm, softmax, Activation, DenseVector, Precision};

/// Per-layer quantities recorded for one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Block input.
    pub x_in: DenseVector,
    /// Attention sub-layer output including its residual, `A(C, x)`.
    pub v_attn: DenseVector,
    /// Normalized (and scaled) MLP input. Equals `v_attn` for the vanilla
    /// variant, which has no pre-norm, and is computed from `x_in` for the
    /// parallel variant.
    pub z_norm: DenseVector,
    /// Input of `W_down`. Empty for the moe variant, see `expert_gated`.
    pub h_gated: DenseVector,
    /// Output of `W_down` (summed gated expert outputs for moe).
    pub h_down: DenseVector,
    /// MLP output before the residual add and before the gemma scale `m`.
    pub h_mlp: DenseVector,
    /// Block output.
    pub x_out: DenseVector,
    /// Router gates (moe only).
    pub gates: Option<DenseVector>,
    pub expert_gated: Vec<DenseVector>,
    pub expert_out: Vec<DenseVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace {
    pub z_norm: DenseVector,
    pub h_gated: DenseVector,
    pub h_down: DenseVector,
    pub h_mlp: DenseVector,
    pub gates: Option<DenseVector>,
    pub expert_gated: Vec<DenseVector>,
    pub expert_out: Vec<DenseVector>,
}

/// Per-layer hidden states of the context positions, i.e. the attention
/// key/value sources. `layers[l][i]` is the input of block `l` at position `i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextStates {
    pub layers: Vec<Vec<DenseVector>>,
}

impl ContextStates {
    pub fn empty(n_layers: usize) -> Self {
        Self {
            layers: vec![Vec::new(); n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: DenseVector,
    /// One entry per layer, for the last position.
    pub traces: Vec<LayerTrace>,
    pub context: ContextStates,
}

struct KeyValue {
    key: DenseVector,
    value: DenseVector,
}

fn key_value(p: &AttnParams, state: &DenseVector, cfg: &ModelConfig) -> Result<KeyValue> {
    let n = scaled_rmsnorm(state, &p.norm_scale, cfg.eps, cfg.precision)?;
    Ok(KeyValue {
        key: p.w_k.matvec(&n, cfg.precision)?,
        value: p.w_v.matvec(&n, cfg.precision)?,
    })
}

fn query(p: &AttnParams, x: &DenseVector, cfg: &ModelConfig) -> Result<DenseVector> {
    let n = scaled_rmsnorm(x, &p.norm_scale, cfg.eps, cfg.precision)?;
    p.w_q.matvec(&n, cfg.precision)
}

/// `x + W_o Σ_i α_i value_i` with `α = softmax(q·k_i / √head_dim)`.
fn attend<'a>(
    p: &AttnParams,
    x: &DenseVector,
    q: &DenseVector,
    entries: impl Iterator<Item = &'a KeyValue> + Clone,
    cfg: &ModelConfig,
) -> Result<DenseVector> {
    let prec = cfg.precision;
    let denom = prec.sqrt(q.len() as f64);
    let scores = entries
        .clone()
        .map(|kv| Ok(prec.div(q.dot(&kv.key, prec)?, denom)))
        .collect::<Result<Vec<_>>>()?;
    let weights = softmax(&DenseVector::new(scores), prec);
    let mut mix = DenseVector::zeros(q.len());
    for (w, kv) in weights.iter().zip(entries) {
        for (acc, &v) in mix.as_mut_slice().iter_mut().zip(kv.value.iter()) {
            *acc = prec.add(*acc, prec.mul(*w, v));
        }
    }
    x.add(&p.w_o.matvec(&mix, prec)?, prec)
}

/// `A(C, x)`: single-head attention over the context states followed by the
/// query itself, plus the residual. An empty `ctx` is the reduced context.
pub fn attention_sublayer(
    p: &AttnParams,
    ctx: &[DenseVector],
    x: &DenseVector,
    cfg: &ModelConfig,
) -> Result<DenseVector> {
    check_len("attention input", cfg.d_model, x.len())?;
    let kvs = ctx
        .iter()
        .chain(iter::once(x))
        .map(|s| {
            check_len("attention context", cfg.d_model, s.len())?;
            key_value(p, s, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let q = query(p, x, cfg)?;
    attend(p, x, &q, kvs.iter(), cfg)
}

/// `act(W_gate z) ⊙ (W_up z)`.
pub fn gated_hidden(
    g: &GatedMlp,
    z: &DenseVector,
    act: Activation,
    p: Precision,
) -> Result<DenseVector> {
    let gate = act.apply_vec(&g.w_gate.matvec(z, p)?, p);
    let up = g.w_up.matvec(z, p)?;
    gate.hadamard(&up, p)
}

/// The additive MLP contribution for input `input`, with its trace.
pub fn mlp_branch(mlp: &Mlp, input: &DenseVector, cfg: &ModelConfig) -> Result<(DenseVector, MlpTrace)> {
    check_len("mlp input", cfg.d_model, input.len())?;
    let (p, eps, act) = (cfg.precision, cfg.eps, cfg.activation);
    let plain = |z: DenseVector, h_gated: DenseVector, h_down: DenseVector, h_mlp: DenseVector| MlpTrace {
        z_norm: z,
        h_gated,
        h_down,
        h_mlp,
        gates: None,
        expert_gated: Vec::new(),
        expert_out: Vec::new(),
    };
    match mlp {
        Mlp::Gemma(g) => {
            let z = scaled_rmsnorm(input, &g.norm1_scale, eps, p)?;
            let h_gated = gated_hidden(&g.mlp, &z, act, p)?;
            let h_down = g.mlp.w_down.matvec(&h_gated, p)?;
            let h_mlp = scaled_rmsnorm(&h_down, &g.norm2_scale, eps, p)?;
            let branch = g.m.hadamard(&h_mlp, p)?;
            Ok((branch, plain(z, h_gated, h_down, h_mlp)))
        }
        Mlp::Llama(l) | Mlp::Parallel(l) => {
            let z = scaled_rmsnorm(input, &l.norm_scale, eps, p)?;
            let h_gated = gated_hidden(&l.mlp, &z, act, p)?;
            let h_down = l.mlp.w_down.matvec(&h_gated, p)?;
            Ok((h_down.clone(), plain(z, h_gated, h_down.clone(), h_down)))
        }
        Mlp::Vanilla(v) => {
            let pre = v.w_1.matvec(input, p)?.add(&v.b_1, p)?;
            let h_gated = act.apply_vec(&pre, p);
            let h_down = v.w_2.matvec(&h_gated, p)?;
            let h_mlp = h_down.add(&v.b_2, p)?;
            Ok((h_mlp.clone(), plain(input.clone(), h_gated, h_down, h_mlp)))
        }
        Mlp::Moe(m) => {
            let z = scaled_rmsnorm(input, &m.norm_scale, eps, p)?;
            let gates = softmax(&m.router.matvec(&z, p)?, p);
            let mut expert_gated = Vec::with_capacity(m.experts.len());
            let mut expert_out = Vec::with_capacity(m.experts.len());
            let mut total = DenseVector::zeros(cfg.d_model);
            for (e, &s) in m.experts.iter().zip(gates.iter()) {
                let hg = gated_hidden(e, &z, act, p)?;
                let out = e.w_down.matvec(&hg, p)?;
                total = total.add(&out.scale(s, p), p)?;
                expert_gated.push(hg);
                expert_out.push(out);
            }
            let trace = MlpTrace {
                z_norm: z,
                h_gated: DenseVector::zeros(0),
                h_down: total.clone(),
                h_mlp: total.clone(),
                gates: Some(gates),
                expert_gated,
                expert_out,
            };
            Ok((total, trace))
        }
    }
}

/// `v + MLP(v)`. For the parallel variant the MLP is evaluated on `v` as
/// given; `block_forward` is what feeds it the block input.
pub fn mlp_sublayer(mlp: &Mlp, v: &DenseVector, cfg: &ModelConfig) -> Result<(DenseVector, MlpTrace)> {
    let (branch, trace) = mlp_branch(mlp, v, cfg)?;
    Ok((v.add(&branch, cfg.precision)?, trace))
}

pub fn block_forward(
    p: &BlockParams,
    ctx: &[DenseVector],
    x: &DenseVector,
    cfg: &ModelConfig,
) -> Result<(DenseVector, LayerTrace)> {
    let v = attention_sublayer(&p.attn, ctx, x, cfg)?;
    finish_block(p, x, v, cfg)
}

fn finish_block(
    p: &BlockParams,
    x: &DenseVector,
    v: DenseVector,
    cfg: &ModelConfig,
) -> Result<(DenseVector, LayerTrace)> {
    let (out, t) = match &p.mlp {
        Mlp::Parallel(_) => {
            let (branch, t) = mlp_branch(&p.mlp, x, cfg)?;
            (v.add(&branch, cfg.precision)?, t)
        }
        mlp => mlp_sublayer(mlp, &v, cfg)?,
    };
    let trace = LayerTrace {
        x_in: x.clone(),
        v_attn: v,
        z_norm: t.z_norm,
        h_gated: t.h_gated,
        h_down: t.h_down,
        h_mlp: t.h_mlp,
        x_out: out.clone(),
        gates: t.gates,
        expert_gated: t.expert_gated,
        expert_out: t.expert_out,
    };
    Ok((out, trace))
}

pub fn embed_token(m: &ModelParams, token: usize) -> Result<DenseVector> {
    if token >= m.config.vocab {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: m.config.vocab,
        });
    }
    Ok(DenseVector::new(m.embed.row(token).to_vec()))
}

/// `embed · (rmsnorm(h) ⊙ final_norm_scale)`.
pub fn logits_from_hidden(m: &ModelParams, h: &DenseVector) -> Result<DenseVector> {
    let cfg = &m.config;
    let n = scaled_rmsnorm(h, &m.final_norm_scale, cfg.eps, cfg.precision)?;
    m.embed.matvec(&n, cfg.precision)
}

/// Causal forward pass over `tokens`. Returns the last position's logits
/// and per-layer trace, and the per-layer states of all earlier positions.
pub fn model_forward(m: &ModelParams, tokens: &[usize]) -> Result<ForwardOutput> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let cfg = &m.config;
    let mut hidden = tokens
        .iter()
        .map(|&t| embed_token(m, t))
        .collect::<Result<Vec<_>>>()?;
    let last = tokens.len() - 1;
    let mut traces = Vec::with_capacity(m.blocks.len());
    let mut context = ContextStates::empty(m.blocks.len());

    for (l, block) in m.blocks.iter().enumerate() {
        let kvs = hidden
            .iter()
            .map(|h| key_value(&block.attn, h, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut next = Vec::with_capacity(hidden.len());
        for (t, x) in hidden.iter().enumerate() {
            let q = query(&block.attn, x, cfg)?;
            let v = attend(&block.attn, x, &q, kvs[..=t].iter(), cfg)?;
            let (out, trace) = finish_block(block, x, v, cfg).map_err(|e| e.in_layer(l))?;
            if t == last {
                traces.push(trace);
            }
            next.push(out);
        }
        context.layers[l] = hidden[..last].to_vec();
        hidden = next;
    }

    Ok(ForwardOutput {
        logits: logits_from_hidden(m, &hidden[last])?,
        traces,
        context,
    })
}
