//! Patched-versus-original comparison during greedy generation.
//!
//! At every step the baseline model runs on the whole history, while a
//! patched copy (recomputed from the original weights) runs on the last
//! token alone. Generation always continues with the baseline's token, so
//! both sides see identical histories even after a mismatch.
//!
//! A step whose patch cannot be formed (a zero activation under the naive
//! update, for instance) is recorded as a failed step and counts as a
//! mismatch; generation carries on.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{gen_random_model, model_forward, ModelConfig, ModelParams};
use crate::numerics::{softmax, DenseVector, Precision, Rng};
use crate::patchkit::{multilayer_patch, PatchMode, PatchOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// `None` on a failed step, like the other patched-side fields.
    pub linf_logits: Option<f64>,
    pub tvd: Option<f64>,
    pub token_match: bool,
    pub baseline_token: usize,
    pub patched_token: Option<usize>,
    /// Largest `|Δm|` over all layers; zero for variants without `m`.
    pub max_delta_m: Option<f64>,
    /// Largest per-layer reconstruction residual of the patch.
    pub max_residual: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Precision and eps of the run are the model's.
    pub model: ModelConfig,
    pub seed: u64,
    pub prompt: Vec<usize>,
    pub n_steps: usize,
    pub patch_mode: PatchMode,
    /// `None` uses the precision default.
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    pub failed_steps: usize,
    /// Failed steps count as mismatches.
    pub match_rate: f64,
    /// Maxima and means are over steps that completed.
    pub max_linf: f64,
    pub mean_linf: f64,
    pub max_tvd: f64,
    pub mean_tvd: f64,
}

fn check_distribution(p: &DenseVector) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::NotAProbabilityVector { sum });
    }
    Ok(())
}

/// Total variation distance `½‖p − q‖₁`.
pub fn tvd(p: &DenseVector, q: &DenseVector) -> Result<f64> {
    check_len("tvd", p.len(), q.len())?;
    check_distribution(p)?;
    check_distribution(q)?;
    let l1: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(0.5 * l1)
}

pub fn linf(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    a.linf_dist(b)
}

/// Random prompt of `len` token ids.
pub fn random_prompt(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| rng.below(vocab)).collect()
}

/// Compares the model on `history` with its patched copy on the last token.
/// Distributions are softmaxes of the logits taken in `f64`.
pub fn compare_step(model: &ModelParams, history: &[usize], opts: &PatchOptions) -> Result<MetricsRecord> {
    let (&query, context) = history.split_last().ok_or(Error::EmptySequence)?;
    let baseline = model_forward(model, history)?.logits;
    let outcome = multilayer_patch(model, context, query, opts)?;
    let patched = model_forward(&outcome.model, &[query])?.logits;

    let p = softmax(&baseline, Precision::Float64);
    let q = softmax(&patched, Precision::Float64);
    let (baseline_token, patched_token) = (baseline.argmax(), patched.argmax());
    Ok(MetricsRecord {
        step: 0,
        linf_logits: Some(linf(&baseline, &patched)?),
        tvd: Some(tvd(&p, &q)?),
        token_match: baseline_token == patched_token,
        baseline_token,
        patched_token: Some(patched_token),
        max_delta_m: Some(outcome.diagnostics.max_patch("m")),
        max_residual: Some(outcome.diagnostics.max_residual()),
        error: None,
    })
}

/// Errors that mean "this context cannot be patched at this step" rather
/// than a broken setup.
fn is_patch_failure(e: &Error) -> bool {
    matches!(
        e.root(),
        Error::ZeroInputVector
            | Error::ZeroPreOutputVector
            | Error::DegenerateActivation { .. }
            | Error::ZeroGatedVector
            | Error::PoleEvaluation(_)
            | Error::BracketFailure(_)
            | Error::DegenerateProblem
            | Error::ZeroVector
            | Error::LayerResidualExceeded { .. }
    )
}

/// `n_steps` of greedy generation from `prompt`, one record per step.
pub fn run_generation(model: &ModelParams, prompt: &[usize], n_steps: usize, opts: &PatchOptions) -> Result<Vec<MetricsRecord>> {
    if n_steps == 0 {
        return Err(Error::Validation("n_steps must be at least 1".into()));
    }
    let mut history = prompt.to_vec();
    let mut records = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let mut rec = match compare_step(model, &history, opts) {
            Ok(rec) => rec,
            Err(e) if is_patch_failure(&e) => MetricsRecord {
                step,
                linf_logits: None,
                tvd: None,
                token_match: false,
                baseline_token: model_forward(model, &history)?.logits.argmax(),
                patched_token: None,
                max_delta_m: None,
                max_residual: None,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        rec.step = step;
        history.push(rec.baseline_token);
        records.push(rec);
    }
    Ok(records)
}

/// Draws the model from `cfg.seed` and runs [`run_generation`].
pub fn generation_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    let model = gen_random_model(&cfg.model, cfg.seed)?;
    let opts = PatchOptions {
        mode: cfg.patch_mode,
        tau: cfg.tau,
        residual_bound: None,
    };
    run_generation(&model, &cfg.prompt, cfg.n_steps, &opts)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let linf: Vec<f64> = records.iter().filter_map(|r| r.linf_logits).collect();
    let tvd: Vec<f64> = records.iter().filter_map(|r| r.tvd).collect();
    let matches: Vec<f64> = records.iter().map(|r| if r.token_match { 1.0 } else { 0.0 }).collect();
    Summary {
        steps: records.len(),
        failed_steps: records.iter().filter(|r| r.error.is_some()).count(),
        match_rate: mean(&matches),
        max_linf: linf.iter().copied().fold(0.0, f64::max),
        mean_linf: mean(&linf),
        max_tvd: tvd.iter().copied().fold(0.0, f64::max),
        mean_tvd: mean(&tvd),
    }
}

/// One JSON object per line.
pub fn write_jsonl(records: &[MetricsRecord], out: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_csv(records: &[MetricsRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<stem>.jsonl`, `<stem>.csv` and `<stem>.summary.json` into `dir`.
pub fn write_reports(records: &[MetricsRecord], dir: &Path, stem: &str) -> Result<Summary> {
    std::fs::create_dir_all(dir)?;
    let mut jsonl = BufWriter::new(File::create(dir.join(format!("{stem}.jsonl")))?);
    write_jsonl(records, &mut jsonl)?;
    jsonl.flush()?;
    write_csv(records, BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?))?;
    let summary = summarize(records);
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(dir.join(format!("{stem}.summary.json")), text)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec())
    }

    #[test]
    fn tvd_examples() {
        assert_eq!(tvd(&v(&[0.3, 0.7]), &v(&[0.3, 0.7])).unwrap(), 0.0);
        assert_eq!(tvd(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(tvd(&v(&[0.5, 0.5]), &v(&[0.75, 0.25])).unwrap(), 0.25);
    }

    #[test]
    fn tvd_rejects_non_distributions() {
        let err = tvd(&v(&[0.5, 0.6]), &v(&[0.5, 0.5])).unwrap_err();
        assert!(matches!(err, Error::NotAProbabilityVector { .. }));
        assert!(tvd(&v(&[1.5, -0.5]), &v(&[0.5, 0.5])).is_err());
        assert!(tvd(&v(&[1.0]), &v(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn linf_examples() {
        assert_eq!(linf(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(linf(&v(&[1.0, 2.0]), &v(&[2.0, 0.0])).unwrap(), 2.0);
        assert!(matches!(linf(&v(&[1.0]), &v(&[1.0, 2.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn linf_matches_loop() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let a = v(&rng.normal_vec(9, 3.0));
            let b = v(&rng.normal_vec(9, 3.0));
            let mut expected: f64 = 0.0;
            for i in 0..9 {
                expected = expected.max((a[i] - b[i]).abs());
            }
            assert_eq!(linf(&a, &b).unwrap(), expected);
        }
    }

    #[test]
    fn single_token_history_is_exact() {
        let model = gen_random_model(&ModelConfig::new(Variant::Gemma, 8, 2, 20), 1).unwrap();
        let rec = compare_step(&model, &[4], &PatchOptions::default()).unwrap();
        assert_eq!(rec.linf_logits, Some(0.0));
        assert_eq!(rec.tvd, Some(0.0));
        assert!(rec.token_match);
        assert!(compare_step(&model, &[], &PatchOptions::default()).is_err());
    }

    #[test]
    fn float64_generation_matches() {
        let cfg = ExperimentConfig {
            model: ModelConfig::new(Variant::Gemma, 16, 2, 40),
            seed: 3,
            prompt: random_prompt(6, 40, 4),
            n_steps: 5,
            patch_mode: PatchMode::Naive,
            tau: None,
        };
        let records = generation_experiment(&cfg).unwrap();
        assert_eq!(records.len(), 5);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.step, i);
            assert!(r.token_match && r.linf_logits.unwrap() < 1e-6 && r.tvd.unwrap() < 1e-8, "{r:?}");
        }
        assert_eq!(summarize(&records).match_rate, 1.0);
    }

    #[test]
    fn bf16_generation_records_finite_metrics() {
        let cfg = ExperimentConfig {
            model: ModelConfig::new(Variant::Gemma, 16, 2, 40).with_precision(Precision::Bf16Emulated),
            seed: 3,
            prompt: random_prompt(6, 40, 4),
            n_steps: 3,
            patch_mode: PatchMode::Stable,
            tau: None,
        };
        for r in generation_experiment(&cfg).unwrap() {
            assert!(r.linf_logits.unwrap().is_finite() && (0.0..=1.0).contains(&r.tvd.unwrap()));
        }
    }

    #[test]
    fn rejects_zero_steps() {
        let model = gen_random_model(&ModelConfig::new(Variant::Llama, 4, 1, 8), 1).unwrap();
        assert!(run_generation(&model, &[1], 0, &PatchOptions::default()).is_err());
    }

    #[test]
    fn summary_and_writers() {
        let rec = |step, linf, tvd, m| MetricsRecord {
            step,
            linf_logits: Some(linf),
            tvd: Some(tvd),
            token_match: m,
            baseline_token: 1,
            patched_token: Some(if m { 1 } else { 2 }),
            max_delta_m: Some(0.0),
            max_residual: Some(0.0),
            error: None,
        };
        let failed = MetricsRecord {
            step: 2,
            linf_logits: None,
            tvd: None,
            token_match: false,
            baseline_token: 1,
            patched_token: None,
            max_delta_m: None,
            max_residual: None,
            error: Some("degenerate".into()),
        };
        let records = vec![rec(0, 0.5, 0.1, true), rec(1, 1.5, 0.3, false), failed];
        let s = summarize(&records);
        assert_eq!((s.steps, s.failed_steps, s.max_linf, s.mean_linf), (3, 1, 1.5, 1.0));
        assert!((s.match_rate - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.mean_tvd - 0.2).abs() < 1e-15 && s.max_tvd == 0.3);

        let mut buf = Vec::new();
        write_jsonl(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(serde_json::from_str::<MetricsRecord>(lines[1]).unwrap(), records[1]);
        assert_eq!(serde_json::from_str::<MetricsRecord>(lines[2]).unwrap(), records[2]);

        let mut buf = Vec::new();
        write_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,linf_logits,tvd,token_match,baseline_token,patched_token"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn degenerate_steps_are_recorded() {
        let mut model = gen_random_model(&ModelConfig::new(Variant::Gemma, 8, 1, 20), 2).unwrap();
        if let crate::model::Mlp::Gemma(g) = &mut model.blocks[0].mlp {
            g.norm2_scale[0] = 0.0;
        }
        let records = run_generation(&model, &[1, 2, 3], 2, &PatchOptions::default()).unwrap();
        assert!(records.iter().all(|r| !r.token_match && r.error.is_some() && r.patched_token.is_none()));
        assert_eq!(summarize(&records).failed_steps, 2);
        assert!(compare_step(&model, &[1, 2, 3], &PatchOptions::default()).is_err());
    }
}
