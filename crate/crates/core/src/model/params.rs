//! Parameter containers and name-based access.
//!
//! Every tensor has a stable name (`attn.W_q`, `W_gate`, `expert[1].W_down`,
//! ...). Names are what the JSON files and patch sets are keyed by.

use super::{ModelConfig, Variant};
use crate::error::{check_len, Error, Result};
use crate::numerics::{DenseMatrix, DenseVector, Precision, Rng};

/// An owned parameter value or delta.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Vector(DenseVector),
    Matrix(DenseMatrix),
}

#[derive(Debug, Clone, Copy)]
pub enum ParamRef<'a> {
    Vector(&'a DenseVector),
    Matrix(&'a DenseMatrix),
}

#[derive(Debug)]
pub enum ParamMut<'a> {
    Vector(&'a mut DenseVector),
    Matrix(&'a mut DenseMatrix),
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Tensor::Vector(v) => vec![v.len()],
            Tensor::Matrix(m) => vec![m.rows(), m.cols()],
        }
    }

    pub fn data(&self) -> &[f64] {
        match self {
            Tensor::Vector(v) => v.as_slice(),
            Tensor::Matrix(m) => m.as_slice(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data().iter().all(|&x| x == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn negated(&self) -> Tensor {
        match self {
            Tensor::Vector(v) => Tensor::Vector(v.map(|x| -x)),
            Tensor::Matrix(m) => {
                let data = m.as_slice().iter().map(|x| -x).collect();
                Tensor::Matrix(DenseMatrix::new(m.rows(), m.cols(), data).expect("same shape"))
            }
        }
    }
}

impl ParamRef<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamRef::Vector(v) => vec![v.len()],
            ParamRef::Matrix(m) => vec![m.rows(), m.cols()],
        }
    }

    pub fn data(&self) -> &[f64] {
        match self {
            ParamRef::Vector(v) => v.as_slice(),
            ParamRef::Matrix(m) => m.as_slice(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        match self {
            ParamRef::Vector(v) => Tensor::Vector((*v).clone()),
            ParamRef::Matrix(m) => Tensor::Matrix((*m).clone()),
        }
    }
}

impl ParamMut<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamMut::Vector(v) => vec![v.len()],
            ParamMut::Matrix(m) => vec![m.rows(), m.cols()],
        }
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        match self {
            ParamMut::Vector(v) => v.as_mut_slice(),
            ParamMut::Matrix(m) => m.as_mut_slice(),
        }
    }

    /// `θ ← round_p(θ + δ)` elementwise.
    pub fn add_delta(&mut self, name: &str, delta: &Tensor, p: Precision) -> Result<()> {
        if self.shape() != delta.shape() {
            return Err(Error::Parameter {
                name: name.to_string(),
                reason: format!("delta shape {:?} does not match {:?}", delta.shape(), self.shape()),
            });
        }
        for (w, d) in self.data_mut().iter_mut().zip(delta.data()) {
            *w = p.add(*w, *d);
        }
        Ok(())
    }

    /// Overwrites the parameter with `data` after a shape check.
    pub fn fill_from(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::Parameter {
                name: name.to_string(),
                reason: format!("shape {:?} does not match expected {:?}", shape, self.shape()),
            });
        }
        let dst = self.data_mut();
        check_len("parameter data", dst.len(), data.len())?;
        dst.copy_from_slice(data);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    /// head_dim × d_model
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    /// d_model × head_dim
    pub w_o: DenseMatrix,
    pub norm_scale: DenseVector,
}

/// Gated projection shared by the Gemma, Llama, parallel and expert MLPs:
/// `W_down (act(W_gate z) ⊙ W_up z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedMlp {
    /// d_ff × d_model
    pub w_gate: DenseMatrix,
    pub w_up: DenseMatrix,
    /// d_model × d_ff
    pub w_down: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GemmaMlp {
    pub norm1_scale: DenseVector,
    pub mlp: GatedMlp,
    /// Learned scale of the inner post-norm; `m` multiplies after it.
    pub norm2_scale: DenseVector,
    pub m: DenseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlamaMlp {
    pub norm_scale: DenseVector,
    pub mlp: GatedMlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaMlp {
    pub w_1: DenseMatrix,
    pub b_1: DenseVector,
    pub w_2: DenseMatrix,
    pub b_2: DenseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeMlp {
    pub norm_scale: DenseVector,
    /// n_experts × d_model
    pub router: DenseMatrix,
    pub experts: Vec<GatedMlp>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mlp {
    Gemma(GemmaMlp),
    Llama(LlamaMlp),
    Vanilla(VanillaMlp),
    /// Llama-shaped MLP that reads the block input instead of the attention output.
    Parallel(LlamaMlp),
    Moe(MoeMlp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn: AttnParams,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// vocab × d_model, also used as the output head.
    pub embed: DenseMatrix,
    pub blocks: Vec<BlockParams>,
    pub final_norm_scale: DenseVector,
}

impl GatedMlp {
    fn zeros(d_model: usize, d_ff: usize) -> Self {
        Self {
            w_gate: DenseMatrix::zeros(d_ff, d_model),
            w_up: DenseMatrix::zeros(d_ff, d_model),
            w_down: DenseMatrix::zeros(d_model, d_ff),
        }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a>)>) {
        out.push((format!("{prefix}W_gate"), ParamRef::Matrix(&self.w_gate)));
        out.push((format!("{prefix}W_up"), ParamRef::Matrix(&self.w_up)));
        out.push((format!("{prefix}W_down"), ParamRef::Matrix(&self.w_down)));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a>)>) {
        out.push((format!("{prefix}W_gate"), ParamMut::Matrix(&mut self.w_gate)));
        out.push((format!("{prefix}W_up"), ParamMut::Matrix(&mut self.w_up)));
        out.push((format!("{prefix}W_down"), ParamMut::Matrix(&mut self.w_down)));
    }
}

impl BlockParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, f, h) = (config.d_model, config.d_ff, config.head_dim);
        let attn = AttnParams {
            w_q: DenseMatrix::zeros(h, d),
            w_k: DenseMatrix::zeros(h, d),
            w_v: DenseMatrix::zeros(h, d),
            w_o: DenseMatrix::zeros(d, h),
            norm_scale: DenseVector::zeros(d),
        };
        let llama = || LlamaMlp {
            norm_scale: DenseVector::zeros(d),
            mlp: GatedMlp::zeros(d, f),
        };
        let mlp = match config.variant {
            Variant::Gemma => Mlp::Gemma(GemmaMlp {
                norm1_scale: DenseVector::zeros(d),
                mlp: GatedMlp::zeros(d, f),
                norm2_scale: DenseVector::zeros(d),
                m: DenseVector::zeros(d),
            }),
            Variant::Llama => Mlp::Llama(llama()),
            Variant::Parallel => Mlp::Parallel(llama()),
            Variant::Vanilla => Mlp::Vanilla(VanillaMlp {
                w_1: DenseMatrix::zeros(f, d),
                b_1: DenseVector::zeros(f),
                w_2: DenseMatrix::zeros(d, f),
                b_2: DenseVector::zeros(d),
            }),
            Variant::Moe => Mlp::Moe(MoeMlp {
                norm_scale: DenseVector::zeros(d),
                router: DenseMatrix::zeros(config.n_experts, d),
                experts: (0..config.n_experts).map(|_| GatedMlp::zeros(d, f)).collect(),
            }),
        };
        Self { attn, mlp }
    }

    pub fn variant(&self) -> Variant {
        match self.mlp {
            Mlp::Gemma(_) => Variant::Gemma,
            Mlp::Llama(_) => Variant::Llama,
            Mlp::Vanilla(_) => Variant::Vanilla,
            Mlp::Parallel(_) => Variant::Parallel,
            Mlp::Moe(_) => Variant::Moe,
        }
    }

    /// All tensors of the block in a fixed order, with block-local names.
    pub fn params(&self) -> Vec<(String, ParamRef<'_>)> {
        let a = &self.attn;
        let mut out = vec![
            ("attn.W_q".to_string(), ParamRef::Matrix(&a.w_q)),
            ("attn.W_k".to_string(), ParamRef::Matrix(&a.w_k)),
            ("attn.W_v".to_string(), ParamRef::Matrix(&a.w_v)),
            ("attn.W_o".to_string(), ParamRef::Matrix(&a.w_o)),
            ("attn.norm_scale".to_string(), ParamRef::Vector(&a.norm_scale)),
        ];
        match &self.mlp {
            Mlp::Gemma(g) => {
                out.push(("norm1_scale".into(), ParamRef::Vector(&g.norm1_scale)));
                g.mlp.params("", &mut out);
                out.push(("norm2_scale".into(), ParamRef::Vector(&g.norm2_scale)));
                out.push(("m".into(), ParamRef::Vector(&g.m)));
            }
            Mlp::Llama(l) | Mlp::Parallel(l) => {
                out.push(("norm_scale".into(), ParamRef::Vector(&l.norm_scale)));
                l.mlp.params("", &mut out);
            }
            Mlp::Vanilla(v) => {
                out.push(("W_1".into(), ParamRef::Matrix(&v.w_1)));
                out.push(("b_1".into(), ParamRef::Vector(&v.b_1)));
                out.push(("W_2".into(), ParamRef::Matrix(&v.w_2)));
                out.push(("b_2".into(), ParamRef::Vector(&v.b_2)));
            }
            Mlp::Moe(m) => {
                out.push(("norm_scale".into(), ParamRef::Vector(&m.norm_scale)));
                out.push(("router".into(), ParamRef::Matrix(&m.router)));
                for (j, e) in m.experts.iter().enumerate() {
                    e.params(&format!("expert[{j}]."), &mut out);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamMut<'_>)> {
        let a = &mut self.attn;
        let mut out = vec![
            ("attn.W_q".to_string(), ParamMut::Matrix(&mut a.w_q)),
            ("attn.W_k".to_string(), ParamMut::Matrix(&mut a.w_k)),
            ("attn.W_v".to_string(), ParamMut::Matrix(&mut a.w_v)),
            ("attn.W_o".to_string(), ParamMut::Matrix(&mut a.w_o)),
            ("attn.norm_scale".to_string(), ParamMut::Vector(&mut a.norm_scale)),
        ];
        match &mut self.mlp {
            Mlp::Gemma(g) => {
                out.push(("norm1_scale".into(), ParamMut::Vector(&mut g.norm1_scale)));
                g.mlp.params_mut("", &mut out);
                out.push(("norm2_scale".into(), ParamMut::Vector(&mut g.norm2_scale)));
                out.push(("m".into(), ParamMut::Vector(&mut g.m)));
            }
            Mlp::Llama(l) | Mlp::Parallel(l) => {
                out.push(("norm_scale".into(), ParamMut::Vector(&mut l.norm_scale)));
                l.mlp.params_mut("", &mut out);
            }
            Mlp::Vanilla(v) => {
                out.push(("W_1".into(), ParamMut::Matrix(&mut v.w_1)));
                out.push(("b_1".into(), ParamMut::Vector(&mut v.b_1)));
                out.push(("W_2".into(), ParamMut::Matrix(&mut v.w_2)));
                out.push(("b_2".into(), ParamMut::Vector(&mut v.b_2)));
            }
            Mlp::Moe(m) => {
                out.push(("norm_scale".into(), ParamMut::Vector(&mut m.norm_scale)));
                out.push(("router".into(), ParamMut::Matrix(&mut m.router)));
                for (j, e) in m.experts.iter_mut().enumerate() {
                    e.params_mut(&format!("expert[{j}]."), &mut out);
                }
            }
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<ParamRef<'_>> {
        self.params().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<ParamMut<'_>> {
        self.params_mut().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }
}

/// Scale vectors start at one, everything else is drawn.
fn is_scale(name: &str) -> bool {
    name.ends_with("_scale") || name == "m"
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_layers).map(|_| BlockParams::zeros(&config)).collect();
        Ok(Self {
            embed: DenseMatrix::zeros(config.vocab, config.d_model),
            final_norm_scale: DenseVector::zeros(config.d_model),
            blocks,
            config,
        })
    }

    /// Every tensor with its fully qualified name (`embed`, `blocks.3.W_up`, ...).
    pub fn params(&self) -> Vec<(String, ParamRef<'_>)> {
        let mut out = vec![("embed".to_string(), ParamRef::Matrix(&self.embed))];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, p)| (format!("blocks.{l}.{n}"), p)));
        }
        out.push(("final_norm_scale".into(), ParamRef::Vector(&self.final_norm_scale)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamMut<'_>)> {
        let mut out = vec![("embed".to_string(), ParamMut::Matrix(&mut self.embed))];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.params_mut().into_iter().map(|(n, p)| (format!("blocks.{l}.{n}"), p)));
        }
        out.push(("final_norm_scale".into(), ParamMut::Vector(&mut self.final_norm_scale)));
        out
    }

    /// Rounds every weight to `precision` and records it in the config.
    pub fn cast(&self, precision: Precision) -> ModelParams {
        let mut out = self.clone();
        out.config.precision = precision;
        for (_, mut p) in out.params_mut() {
            for w in p.data_mut() {
                *w = precision.round(*w);
            }
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, p) in self.params() {
            if let Some(i) = p.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Parameter {
                    name,
                    reason: format!("entry {i} is not finite"),
                });
            }
        }
        Ok(())
    }
}

/// Draws a model: matrices are i.i.d. `N(0, 1/fan_in)` with `fan_in` the
/// column count, biases use the fan-in of the layer they belong to, and
/// norm scales and `m` are all ones. Weights are rounded to the configured
/// precision.
pub fn gen_random_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut model = ModelParams::zeros(config.clone())?;
    let mut rng = Rng::new(seed);
    let (d_model, d_ff) = (config.d_model, config.d_ff);
    for (name, mut p) in model.params_mut() {
        let local = name.rsplit('.').next().unwrap_or(&name);
        if is_scale(local) {
            p.data_mut().fill(1.0);
            continue;
        }
        let fan_in = match (&p, local) {
            (ParamMut::Matrix(m), _) => m.cols(),
            (ParamMut::Vector(_), "b_1") => d_model,
            (ParamMut::Vector(_), "b_2") => d_ff,
            (ParamMut::Vector(v), _) => v.len(),
        };
        let std = 1.0 / (fan_in as f64).sqrt();
        for w in p.data_mut() {
            *w = rng.normal() * std;
        }
    }
    Ok(model.cast(config.precision))
}
