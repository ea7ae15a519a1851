//! Command-line front end.
//!
//! ```text
//! ctxpatch gen-model --d-model 32 --layers 4 --seed 7 -o m.json
//! ctxpatch patch     --model m.json --prompt 3,14,15,9 -o delta.json
//! ctxpatch apply     --model m.json --patch delta.json -o patched.json
//! ctxpatch compare   --model m.json --prompt-len 8
//! ctxpatch generate  --model m.json --steps 16 --out-dir runs/
//! ctxpatch verify    --model m.json
//! ```
//!
//! `CTXPATCH_SEED`, when set, replaces any `--seed` value.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::Error;
use crate::harness::{compare_step, random_prompt, run_generation, write_reports, MetricsRecord};
use crate::model::{gen_random_model, model_forward, ModelConfig, ModelParams, Variant};
use crate::numerics::{Activation, Precision, DEFAULT_EPS};
use crate::patchkit::{multilayer_patch, PatchMode, PatchOptions, PatchSet};

pub const SEED_ENV: &str = "CTXPATCH_SEED";

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const VALIDATION: i32 = 4;
    pub const DEGENERATE: i32 = 5;
    pub const DOMAIN: i32 = 6;
    pub const RESIDUAL: i32 = 7;
}

#[derive(Debug, Parser)]
#[command(name = "ctxpatch", version, about = "Compile a context into weight patches and check the patched model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a random model and write it as JSON.
    GenModel(GenModelArgs),
    /// Patch a model so the last prompt token alone reproduces the full prompt.
    Patch(PatchArgs),
    /// Add a patch file to a model.
    Apply(ApplyArgs),
    /// One-step equivalence report for a prompt.
    Compare(CompareArgs),
    /// Greedy generation comparing original and patched models at every step.
    Generate(GenerateArgs),
    /// Run the built-in consistency checks on a model file.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long, default_value = "gemma")]
    pub variant: Variant,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    /// Defaults to twice `--d-model`.
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Defaults to `--d-model`.
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 100)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2)]
    pub n_experts: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Defaults to the variant's usual activation.
    #[arg(long)]
    pub activation: Option<Activation>,
    #[arg(long, default_value = "f64")]
    pub precision: Precision,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelInput {
    #[arg(short, long)]
    pub model: PathBuf,
    /// Recast the model to this precision before use.
    #[arg(long)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "prompt_len")]
    pub prompt: Option<Vec<usize>>,
    /// Length of a seeded random prompt, used when `--prompt` is absent.
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PatchModeArgs {
    #[arg(long, default_value = "naive")]
    pub patch_mode: PatchMode,
    /// Zero-activation threshold; defaults to 0 in f64 and 1e-20 otherwise.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Largest accepted per-layer residual; defaults to 1e-6 in f64 and no
    /// bound otherwise.
    #[arg(long)]
    pub residual_bound: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub mode: PatchModeArgs,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Per-layer diagnostics as JSON.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(short, long)]
    pub model: PathBuf,
    #[arg(long)]
    pub patch: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub mode: PatchModeArgs,
    /// Also write the report here.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub mode: PatchModeArgs,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// File name stem of the reports.
    #[arg(long, default_value = "metrics")]
    pub stem: String,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Context length of the equivalence check.
    #[arg(long, default_value_t = 4)]
    pub context_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Run(e) => match e.root() {
                Error::Io(_) => exit::IO,
                Error::Validation(_)
                | Error::InvalidConfig(_)
                | Error::Parameter { .. }
                | Error::Json(_)
                | Error::Csv(_)
                | Error::TokenOutOfRange { .. }
                | Error::EmptySequence
                | Error::DimensionMismatch { .. } => exit::VALIDATION,
                Error::DegenerateActivation { .. } => exit::DEGENERATE,
                Error::LayerResidualExceeded { .. } => exit::RESIDUAL,
                _ => exit::DOMAIN,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first) and applies `CTXPATCH_SEED`.
pub fn parse_args<I, T>(argv: I, seed_env: Option<&str>) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut cli = Cli::try_parse_from(argv)?;
    if let Some(raw) = seed_env {
        let seed: u64 = raw.trim().parse().map_err(|_| {
            clap::Error::raw(
                clap::error::ErrorKind::InvalidValue,
                format!("{SEED_ENV} must be an unsigned integer, got '{raw}'\n"),
            )
        })?;
        match &mut cli.command {
            Command::GenModel(a) => a.seed = seed,
            Command::Patch(a) => a.prompt.seed = seed,
            Command::Compare(a) => a.prompt.seed = seed,
            Command::Generate(a) => a.prompt.seed = seed,
            Command::Verify(a) => a.seed = seed,
            Command::Apply(_) => {}
        }
    }
    Ok(cli)
}

fn positive(name: &str, value: usize) -> CliResult<()> {
    if value == 0 {
        return Err(CliError::Usage(format!("--{name} must be positive")));
    }
    Ok(())
}

fn load_model(input: &ModelInput) -> CliResult<ModelParams> {
    let model = ModelParams::load(&input.model)?;
    Ok(match input.precision {
        Some(p) if p != model.config.precision => model.cast(p),
        _ => model,
    })
}

fn prompt_tokens(args: &PromptArgs, vocab: usize) -> CliResult<Vec<usize>> {
    match &args.prompt {
        Some(tokens) if tokens.is_empty() => Err(CliError::Usage("--prompt needs at least one token".into())),
        Some(tokens) => Ok(tokens.clone()),
        None => {
            positive("prompt-len", args.prompt_len)?;
            Ok(random_prompt(args.prompt_len, vocab, args.seed))
        }
    }
}

fn options(args: &PatchModeArgs) -> PatchOptions {
    PatchOptions {
        mode: args.patch_mode,
        tau: args.tau,
        residual_bound: args.residual_bound,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn gen_model(a: &GenModelArgs, out: &mut dyn Write) -> CliResult<()> {
    for (name, v) in [("d-model", a.d_model), ("layers", a.layers), ("vocab", a.vocab), ("n-experts", a.n_experts)] {
        positive(name, v)?;
    }
    let mut cfg = ModelConfig::new(a.variant, a.d_model, a.layers, a.vocab)
        .with_precision(a.precision)
        .with_eps(a.eps);
    cfg.d_ff = a.d_ff.unwrap_or(cfg.d_ff);
    cfg.head_dim = a.head_dim.unwrap_or(cfg.head_dim);
    cfg.n_experts = a.n_experts;
    cfg.activation = a.activation.unwrap_or(cfg.activation);
    positive("d-ff", cfg.d_ff)?;
    positive("head-dim", cfg.head_dim)?;
    let model = gen_random_model(&cfg, a.seed)?;
    model.save(&a.output)?;
    writeln!(out, "wrote {} model ({} layers) to {}", cfg.variant, cfg.n_layers, a.output.display()).map_err(Error::from)?;
    Ok(())
}

fn patch(a: &PatchArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&a.input)?;
    let tokens = prompt_tokens(&a.prompt, model.config.vocab)?;
    let (&query, context) = tokens.split_last().expect("prompt is non-empty");
    let outcome = multilayer_patch(&model, context, query, &options(&a.mode))?;
    outcome.patch.save(&model.config, &a.output)?;
    if let Some(path) = &a.diagnostics {
        write_json(path, &outcome.diagnostics)?;
    }
    for d in &outcome.diagnostics.layers {
        writeln!(out, "layer {}: |ΔA|∞ {:.3e}, residual {:.3e}", d.layer, d.delta_linf, d.residual).map_err(Error::from)?;
    }
    writeln!(out, "wrote patch to {}", a.output.display()).map_err(Error::from)?;
    Ok(())
}

fn apply(a: &ApplyArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut model = ModelParams::load(&a.model)?;
    let patch = PatchSet::load(&a.patch)?;
    patch.apply(&mut model)?;
    model.check_finite()?;
    model.save(&a.output)?;
    writeln!(out, "wrote patched model to {}", a.output.display()).map_err(Error::from)?;
    Ok(())
}

#[derive(Serialize)]
struct CompareReport<'a> {
    prompt: &'a [usize],
    precision: Precision,
    patch_mode: PatchMode,
    #[serde(flatten)]
    metrics: MetricsRecord,
}

fn compare(a: &CompareArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&a.input)?;
    let tokens = prompt_tokens(&a.prompt, model.config.vocab)?;
    let metrics = compare_step(&model, &tokens, &options(&a.mode))?;
    let report = CompareReport {
        prompt: &tokens,
        precision: model.config.precision,
        patch_mode: a.mode.patch_mode,
        metrics,
    };
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    writeln!(out, "{text}").map_err(Error::from)?;
    if let Some(path) = &a.output {
        write_json(path, &report)?;
    }
    Ok(())
}

fn generate(a: &GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    positive("steps", a.steps)?;
    let model = load_model(&a.input)?;
    let tokens = prompt_tokens(&a.prompt, model.config.vocab)?;
    let records = run_generation(&model, &tokens, a.steps, &options(&a.mode))?;
    let summary = write_reports(&records, &a.out_dir, &a.stem)?;
    let text = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    writeln!(out, "{text}").map_err(Error::from)?;
    Ok(())
}

/// Consistency checks on a model file. Each passing check prints one line;
/// the first failure stops the run.
fn verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&a.input)?;
    let cfg = &model.config;
    let mut ok = |name: &str, detail: String| writeln!(out, "ok {name}: {detail}").map_err(Error::from);
    let fail = |name: &str, detail: String| CliError::Run(Error::Validation(format!("{name}: {detail}")));

    model.check_finite()?;
    cfg.validate()?;
    ok("load", format!("{} model, {} layers, {}", cfg.variant, cfg.n_layers, cfg.precision))?;

    let json = model.to_weight_file().to_json()?;
    let back = ModelParams::from_weight_file(&crate::model::io::WeightFile::from_json(&json)?)?;
    if back.to_weight_file().to_json()? != json {
        return Err(fail("round trip", "save/load changed the model".into()));
    }
    ok("round trip", format!("{} bytes", json.len()))?;

    let query = random_prompt(1, cfg.vocab, a.seed)[0];
    let trivial = multilayer_patch(&model, &[], query, &PatchOptions::default())?;
    let same = model_forward(&trivial.model, &[query])?.logits == model_forward(&model, &[query])?.logits;
    if !trivial.patch.is_zero() || !same {
        return Err(fail("empty context", "patch is not a no-op".into()));
    }
    ok("empty context", "zero patch, identical logits".into())?;

    let context = random_prompt(a.context_len, cfg.vocab, a.seed.wrapping_add(1));
    let outcome = multilayer_patch(&model, &context, query, &PatchOptions::default())?;
    let mut full = context.clone();
    full.push(query);
    let target = model_forward(&model, &full)?.logits;
    let got = model_forward(&outcome.model, &[query])?.logits;
    let linf = target.linf_dist(&got)?;
    if cfg.precision == Precision::Float64 && (linf >= 1e-6 || target.argmax() != got.argmax()) {
        return Err(fail("equivalence", format!("logit L∞ {linf:e}")));
    }
    ok("equivalence", format!("context of {}, logit L∞ {linf:.3e}", context.len()))?;

    let file = outcome.patch.to_weight_file(cfg);
    let reread = PatchSet::from_weight_file(&crate::model::io::WeightFile::from_json(&file.to_json()?)?)?;
    if reread != outcome.patch || reread.patched(&model)? != outcome.model {
        return Err(fail("patch file", "patch did not survive serialization".into()));
    }
    ok("patch file", "round trip and re-apply reproduce the patched model".into())?;
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::GenModel(a) => gen_model(a, out),
        Command::Patch(a) => patch(a, out),
        Command::Apply(a) => apply(a, out),
        Command::Compare(a) => compare(a, out),
        Command::Generate(a) => generate(a, out),
        Command::Verify(a) => verify(a, out),
    }
}

/// Entry point used by the binary. Returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    let cli = match parse_args(argv, env_seed.as_deref()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
