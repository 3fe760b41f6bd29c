//! The four harness commands: `train`, `bench`, `spectral`, and
//! `gradcheck`. Each parses a strict JSON config (unknown keys rejected),
//! runs deterministically from its seed, and produces a validated
//! [`RunReport`] plus plot-ready CSV files.

use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Value};

use agf_core::attention::{agf_materialize_h, vanilla_attention_matrix, AgfParams, VanillaParams};
use agf_core::model::{AttentionVariant, ModelConfig, SequenceClassifier};
use agf_core::poly::{BasisSpec, FilterCoefficients};
use agf_core::spectral::{
    cosine_similarity_by_layer, filter_response, layer_frequency_response, lowpass_trajectory,
};
use agf_core::tensor::Tape;
use agf_core::training::{
    gen_frequency_task, grad_check, load_csv_dataset, train, Dataset, TrainConfig, TrainError,
};
use agf_core::{Mat, Prng};

use crate::bench::{check_no_quadratic_intermediate, measure_variant, slope_of, BenchVariant};
use crate::report::{csv_from_rows, BenchmarkSection, EpochRow, RunReport, Verdict};

#[derive(Debug)]
pub enum HarnessError {
    /// Bad usage, unreadable or invalid config: exit code 2.
    Config(String),
    /// Filesystem trouble while reading inputs or writing outputs.
    Io(String),
}

impl std::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HarnessError::Config(msg) => write!(f, "config error: {msg}"),
            HarnessError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for HarnessError {}

/// Everything a command wants written to the output directory.
pub struct CommandOutput {
    /// (file name, report) pairs; every report is schema-validated on write.
    pub reports: Vec<(String, RunReport)>,
    /// (file name, contents) pairs for CSV curve files.
    pub files: Vec<(String, String)>,
}

impl CommandOutput {
    pub fn any_failure(&self) -> bool {
        self.reports.iter().any(|(_, r)| r.any_failure())
    }
}

/// Effective thread cap from `AGF_THREADS`. All compute is single-threaded
/// for bit-exact determinism, which trivially respects any cap >= 1.
pub fn thread_cap() -> Result<usize, HarnessError> {
    parse_thread_cap(std::env::var("AGF_THREADS").ok().as_deref())
}

pub fn parse_thread_cap(raw: Option<&str>) -> Result<usize, HarnessError> {
    match raw {
        Some(raw) => {
            let parsed: usize = raw.parse().map_err(|_| {
                HarnessError::Config(format!("AGF_THREADS='{raw}' is not a positive integer"))
            })?;
            if parsed == 0 {
                return Err(HarnessError::Config(
                    "AGF_THREADS must be at least 1".into(),
                ));
            }
            Ok(parsed)
        }
        None => Ok(1),
    }
}

fn parse_variant(name: &str) -> Result<AttentionVariant, HarnessError> {
    match name {
        "agf" => Ok(AttentionVariant::Agf),
        "vanilla" => Ok(AttentionVariant::Vanilla),
        other => Err(HarnessError::Config(format!(
            "unknown variant '{other}' (expected 'agf' or 'vanilla')"
        ))),
    }
}

fn parse_basis(name: &str, k: usize, a: f64, b: f64) -> Result<BasisSpec, HarnessError> {
    match name {
        "monomial" => Ok(BasisSpec::monomial(k)),
        "jacobi" => BasisSpec::jacobi(k, a, b).map_err(|e| HarnessError::Config(e.to_string())),
        other => Err(HarnessError::Config(format!(
            "unknown basis '{other}' (expected 'monomial' or 'jacobi')"
        ))),
    }
}

// ── train ────────────────────────────────────────────────────────────

fn default_synthetic_samples() -> usize {
    2500
}
fn default_synthetic_seq_len() -> usize {
    64
}
fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub variant: String,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub basis: String,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// "synthetic" or a CSV path.
    pub dataset: String,
    #[serde(default)]
    pub freeze_theta: bool,
    /// Optional sweep: one full run (and one report) per K value.
    #[serde(default)]
    pub sweep_k: Option<Vec<usize>>,
    #[serde(default = "default_synthetic_samples")]
    pub synthetic_samples: usize,
    #[serde(default = "default_synthetic_seq_len")]
    pub synthetic_seq_len: usize,
    /// Train share when loading a CSV (synthetic data carries its own tags).
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn resolve_dataset(cfg: &TrainFileConfig, seed: u64) -> Result<Dataset, HarnessError> {
    if cfg.dataset == "synthetic" {
        if cfg.synthetic_seq_len < 8 {
            return Err(HarnessError::Config(
                "synthetic_seq_len must be at least 8".into(),
            ));
        }
        if cfg.synthetic_samples == 0 {
            return Err(HarnessError::Config(
                "synthetic_samples must be positive".into(),
            ));
        }
        Ok(gen_frequency_task(
            seed,
            cfg.synthetic_samples,
            cfg.synthetic_seq_len,
        ))
    } else {
        let mut ds = load_csv_dataset(Path::new(&cfg.dataset))
            .map_err(|e| HarnessError::Config(format!("dataset '{}': {e}", cfg.dataset)))?;
        ds.split_by_ratio(cfg.train_fraction);
        Ok(ds)
    }
}

fn metrics_csv(history: &[agf_core::training::EpochMetrics]) -> String {
    let rows: Vec<Vec<f64>> = history
        .iter()
        .map(|m| {
            vec![
                m.epoch as f64,
                m.train_accuracy,
                m.test_accuracy,
                m.task_loss,
                m.ortho_loss,
            ]
        })
        .collect();
    csv_from_rows(
        "epoch,train_accuracy,test_accuracy,task_loss,ortho_loss",
        &rows,
    )
}

pub fn cmd_train(
    raw_config: &Value,
    seed_override: Option<u64>,
) -> Result<CommandOutput, HarnessError> {
    let cfg: TrainFileConfig = serde_json::from_value(raw_config.clone())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let threads = thread_cap()?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let dataset = resolve_dataset(&cfg, seed)?;
    let variant = parse_variant(&cfg.variant)?;

    let k_values = cfg.sweep_k.clone().unwrap_or_else(|| vec![cfg.k]);
    if k_values.is_empty() {
        return Err(HarnessError::Config("sweep_k must not be empty".into()));
    }
    let sweeping = cfg.sweep_k.is_some();

    let mut out = CommandOutput {
        reports: Vec::new(),
        files: Vec::new(),
    };
    for k in k_values {
        let basis = parse_basis(&cfg.basis, k, cfg.a, cfg.b)?;
        let train_config = TrainConfig {
            variant,
            d: cfg.d,
            heads: cfg.heads,
            layers: cfg.layers,
            basis,
            gamma: cfg.gamma,
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed,
            freeze_theta: cfg.freeze_theta,
        };
        let mut config_echo = raw_config.clone();
        config_echo["K"] = json!(k);

        let mut report = RunReport::new("train", seed, threads, config_echo);
        match train(&train_config, &dataset) {
            Ok(result) => {
                let final_metrics = result.history.last();
                report.verdicts.push(Verdict::new(
                    "training_completed",
                    true,
                    json!({
                        "final_train_accuracy": final_metrics.map(|m| m.train_accuracy),
                        "final_test_accuracy": final_metrics.map(|m| m.test_accuracy),
                        "epochs": result.history.len(),
                    }),
                ));
                report.epochs = Some(
                    result
                        .history
                        .iter()
                        .map(|m| EpochRow {
                            epoch: m.epoch,
                            train_accuracy: m.train_accuracy,
                            test_accuracy: m.test_accuracy,
                            task_loss: m.task_loss,
                            ortho_loss: m.ortho_loss,
                        })
                        .collect(),
                );
                let csv_name = if sweeping {
                    format!("metrics_k{k}.csv")
                } else {
                    "metrics.csv".to_string()
                };
                report.artifacts.push(csv_name.clone());
                out.files.push((csv_name, metrics_csv(&result.history)));
            }
            Err(TrainError::Diverged { epoch, batch }) => {
                report.verdicts.push(Verdict::new(
                    "training_completed",
                    false,
                    json!({ "diverged_at_epoch": epoch, "diverged_at_batch": batch }),
                ));
            }
            Err(e) => return Err(HarnessError::Config(e.to_string())),
        }
        let report_name = if sweeping {
            format!("train_report_k{k}.json")
        } else {
            "train_report.json".to_string()
        };
        out.reports.push((report_name, report));
    }
    Ok(out)
}

// ── bench ────────────────────────────────────────────────────────────

fn default_repeats() -> usize {
    7
}
fn default_warmups() -> usize {
    2
}
fn default_bench_k() -> usize {
    3
}
fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFileConfig {
    pub n_list: Vec<usize>,
    pub d: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_warmups")]
    pub warmups: usize,
    #[serde(default = "default_bench_k", rename = "K")]
    pub k: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

pub const AGF_SLOPE_BAND: (f64, f64) = (0.8, 1.3);
pub const VANILLA_SLOPE_BAND: (f64, f64) = (1.7, 2.2);

pub fn cmd_bench(
    raw_config: &Value,
    seed_override: Option<u64>,
) -> Result<CommandOutput, HarnessError> {
    let cfg: BenchFileConfig = serde_json::from_value(raw_config.clone())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let threads = thread_cap()?;
    let seed = seed_override.unwrap_or(cfg.seed);
    if cfg.n_list.len() < 4 {
        return Err(HarnessError::Config(
            "n_list needs at least 4 points".into(),
        ));
    }
    if cfg.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Config(
            "n_list must be strictly ascending".into(),
        ));
    }
    if cfg.repeats == 0 {
        return Err(HarnessError::Config("repeats must be positive".into()));
    }
    let basis = BasisSpec::monomial(cfg.k);

    let mut report = RunReport::new("bench", seed, threads, raw_config.clone());
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    let mut dropped = Vec::new();
    let mut csv_rows: Vec<Vec<f64>> = Vec::new();

    for variant in [BenchVariant::Agf, BenchVariant::Vanilla] {
        let (cells, notes) = measure_variant(
            variant,
            &cfg.n_list,
            cfg.d,
            cfg.repeats,
            cfg.warmups,
            basis,
            seed,
        );
        dropped.extend(notes);
        for cell in &cells {
            rows.push(cell.to_row());
            for (i, &s) in cell.seconds.iter().enumerate() {
                csv_rows.push(vec![
                    if variant == BenchVariant::Agf {
                        0.0
                    } else {
                        1.0
                    },
                    cell.n as f64,
                    i as f64,
                    s,
                ]);
            }
        }
        let band = match variant {
            BenchVariant::Agf => AGF_SLOPE_BAND,
            BenchVariant::Vanilla => VANILLA_SLOPE_BAND,
        };
        let verdict_name = format!("{}_slope_in_band", variant.name());
        if cells.len() >= 2 {
            let fit = slope_of(&cells, variant, seed);
            let pass = fit.slope >= band.0 && fit.slope <= band.1;
            report.verdicts.push(Verdict::new(
                verdict_name,
                pass,
                json!({
                    "slope": fit.slope,
                    "ci_low": fit.ci_low,
                    "ci_high": fit.ci_high,
                    "band": [band.0, band.1],
                }),
            ));
            slopes.push(fit);
        } else {
            report.verdicts.push(Verdict::skipped(
                verdict_name,
                json!({"reason": "fewer than two usable timing points"}),
            ));
        }
    }

    // Structural check at the largest benchmarked size.
    let n_max = *cfg.n_list.last().unwrap();
    match check_no_quadratic_intermediate(n_max, cfg.d, basis, seed) {
        Ok(max_numel) => report.verdicts.push(Verdict::new(
            "no_quadratic_intermediate",
            true,
            json!({"n": n_max, "max_intermediate_numel": max_numel, "budget": basis.coeff_len() * n_max * cfg.d}),
        )),
        Err(detail) => report.verdicts.push(Verdict::new(
            "no_quadratic_intermediate",
            false,
            json!({"n": n_max, "violation": detail}),
        )),
    }

    report.benchmark = Some(BenchmarkSection {
        d: cfg.d,
        repeats: cfg.repeats,
        warmups: cfg.warmups,
        rows,
        slopes,
        dropped,
    });
    report.artifacts.push("bench_times.csv".to_string());
    report
        .notes
        .push("variant column: 0 = agf, 1 = vanilla".to_string());

    Ok(CommandOutput {
        reports: vec![("bench_report.json".to_string(), report)],
        files: vec![(
            "bench_times.csv".to_string(),
            csv_from_rows("variant,n,repeat,seconds", &csv_rows),
        )],
    })
}

// ── spectral ─────────────────────────────────────────────────────────

fn default_trials() -> usize {
    10
}
fn default_t1_n() -> usize {
    32
}
fn default_steps() -> usize {
    64
}
fn default_cutoff() -> usize {
    1
}
fn default_theta_samples() -> usize {
    1000
}
fn default_k_max() -> usize {
    8
}
fn default_alphas() -> Vec<f64> {
    vec![0.5, 0.9]
}
fn default_highpass_k() -> usize {
    200
}
fn default_resp_n() -> usize {
    64
}
fn default_resp_d() -> usize {
    8
}
fn default_probes() -> usize {
    4
}
fn default_os_layers() -> usize {
    4
}
fn default_os_d() -> usize {
    16
}
fn default_os_k() -> usize {
    4
}
fn default_os_epochs() -> usize {
    30
}
fn default_os_samples() -> usize {
    1000
}
fn default_os_seq_len() -> usize {
    64
}
fn default_os_lr() -> f64 {
    3e-3
}
fn default_os_gamma() -> f64 {
    0.01
}
fn default_os_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralFileConfig {
    /// theorem1 | theorem2 | response | oversmoothing
    pub mode: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    // theorem1
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_t1_n")]
    pub n: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
    // theorem2
    #[serde(default = "default_theta_samples")]
    pub theta_samples: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_highpass_k")]
    pub highpass_k: usize,
    // response
    #[serde(default = "default_resp_n")]
    pub resp_n: usize,
    #[serde(default = "default_resp_d")]
    pub resp_d: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    // oversmoothing
    #[serde(default = "default_os_layers")]
    pub os_layers: usize,
    #[serde(default = "default_os_d")]
    pub os_d: usize,
    #[serde(default = "default_os_k")]
    pub os_k: usize,
    #[serde(default = "default_os_epochs")]
    pub os_epochs: usize,
    #[serde(default = "default_os_samples")]
    pub os_samples: usize,
    #[serde(default = "default_os_seq_len")]
    pub os_seq_len: usize,
    #[serde(default = "default_os_lr")]
    pub os_lr: f64,
    #[serde(default = "default_os_gamma")]
    pub os_gamma: f64,
    #[serde(default = "default_os_seeds")]
    pub os_seeds: Vec<u64>,
}

/// Softmax of a random logit matrix: the canonical row-stochastic mixing
/// matrix of the smoothing experiments.
pub fn random_softmax_matrix(n: usize, rng: &mut Prng) -> Mat {
    let mut m = Mat::zeros(n, n);
    for r in 0..n {
        let logits: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for c in 0..n {
            m.set(r, c, exps[c] / sum);
        }
    }
    m
}

/// Uniform point on the probability simplex with K+1 coordinates.
pub fn random_simplex_theta(k: usize, rng: &mut Prng) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..=k).map(|_| -rng.next_f64().max(1e-300).ln()).collect();
        let sum: f64 = raw.iter().sum();
        let theta: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        if theta[1..].iter().any(|&t| t > 0.0) {
            return theta;
        }
    }
}

fn run_theorem1(
    cfg: &SpectralFileConfig,
    seed: u64,
    report: &mut RunReport,
) -> Vec<(String, String)> {
    let mut all_pass = true;
    let mut worst_final: f64 = 0.0;
    let mut csv_rows = Vec::new();
    for trial in 0..cfg.trials {
        let mut rng = Prng::new(seed.wrapping_add(trial as u64));
        let m = random_softmax_matrix(cfg.n, &mut rng);
        let x: Vec<f64> = (0..cfg.n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ratios = lowpass_trajectory(&m, &x, cfg.steps, cfg.cutoff).expect("valid trajectory");
        for (t, &r) in ratios.iter().enumerate() {
            csv_rows.push(vec![trial as f64, (t + 1) as f64, r]);
        }
        let final_ratio = *ratios.last().unwrap();
        let first_ratio = ratios[0];
        worst_final = worst_final.max(final_ratio);
        if !(final_ratio < 1e-3 && final_ratio < first_ratio) {
            all_pass = false;
        }
    }
    report.verdicts.push(Verdict::new(
        "softmax_power_iteration_is_low_pass",
        all_pass,
        json!({
            "trials": cfg.trials,
            "n": cfg.n,
            "steps": cfg.steps,
            "cutoff": cfg.cutoff,
            "worst_final_ratio": worst_final,
            "threshold": 1e-3,
        }),
    ));
    report.artifacts.push("theorem1_curves.csv".to_string());
    vec![(
        "theorem1_curves.csv".to_string(),
        csv_from_rows("trial,step,hfc_lfc_ratio", &csv_rows),
    )]
}

fn theorem2_lambda_grid() -> Vec<f64> {
    let mut grid = vec![1.0];
    let mut l = -0.95;
    while l < 0.955 {
        grid.push(l);
        l += 0.1;
    }
    grid
}

fn run_theorem2(
    cfg: &SpectralFileConfig,
    seed: u64,
    report: &mut RunReport,
) -> Vec<(String, String)> {
    let mut rng = Prng::new(seed);
    let grid = theorem2_lambda_grid();

    // (a) simplex-constrained non-negative coefficients act low-pass.
    let mut low_pass_violations = 0usize;
    for _ in 0..cfg.theta_samples {
        let k = 1 + rng.below(cfg.k_max);
        let theta = FilterCoefficients::new(random_simplex_theta(k, &mut rng));
        let basis = BasisSpec::monomial(k);
        let resp = filter_response(&theta, &basis, &grid).expect("valid response");
        if resp.ratios[1..].iter().any(|&r| r >= 1.0) {
            low_pass_violations += 1;
        }
    }
    report.verdicts.push(Verdict::new(
        "simplex_theta_is_low_pass",
        low_pass_violations == 0,
        json!({
            "samples": cfg.theta_samples,
            "max_order": cfg.k_max,
            "violations": low_pass_violations,
        }),
    ));

    // (b) alternating-sign geometric coefficients act high-pass and match
    // the closed form 1/(1 + alpha * lambda).
    let mut high_pass_ok = true;
    let mut worst_closed_form_err: f64 = 0.0;
    let mut csv_rows = Vec::new();
    for &alpha in &cfg.alphas {
        let theta: Vec<f64> = (0..=cfg.highpass_k)
            .map(|i| (-alpha).powi(i as i32))
            .collect();
        let theta = FilterCoefficients::new(theta);
        let basis = BasisSpec::monomial(cfg.highpass_k);
        let resp = filter_response(&theta, &basis, &grid).expect("valid response");
        for (i, &l) in resp.lambdas.iter().enumerate() {
            let closed = 1.0 / (1.0 + alpha * l);
            let err = (resp.responses[i] - closed).abs();
            worst_closed_form_err = worst_closed_form_err.max(err);
            csv_rows.push(vec![alpha, l, resp.responses[i], closed]);
            if err >= 1e-6 {
                high_pass_ok = false;
            }
            if i > 0 && resp.ratios[i] <= 1.0 {
                high_pass_ok = false;
            }
        }
    }
    report.verdicts.push(Verdict::new(
        "alternating_theta_is_high_pass",
        high_pass_ok,
        json!({
            "alphas": cfg.alphas,
            "truncation_order": cfg.highpass_k,
            "worst_closed_form_error": worst_closed_form_err,
            "tolerance": 1e-6,
        }),
    ));
    report.artifacts.push("theorem2_highpass.csv".to_string());
    vec![(
        "theorem2_highpass.csv".to_string(),
        csv_from_rows("alpha,lambda,response,closed_form", &csv_rows),
    )]
}

fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mean_x = (ys.len() as f64 - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}

fn run_response(
    cfg: &SpectralFileConfig,
    seed: u64,
    report: &mut RunReport,
) -> Vec<(String, String)> {
    let n = cfg.resp_n;
    let d = cfg.resp_d;
    let bins = n / 2 + 1;
    let mut vanilla_mean = vec![0.0; bins];
    let mut agf_unit_mean = vec![0.0; bins];
    let mut agf_alt_mean = vec![0.0; bins];
    let trials = cfg.trials;
    for trial in 0..trials {
        let mut rng = Prng::new(seed.wrapping_add(trial as u64));
        let mut mk =
            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect() };
        let x_data = mk(n * d);
        let wq = mk(d * d);
        let wk = mk(d * d);
        let wv = mk(d * d);

        let mut tape = Tape::new();
        let x = tape.input(vec![n, d], x_data.clone()).unwrap();
        let p = VanillaParams {
            w_qry: tape.input(vec![d, d], wq).unwrap(),
            w_key: tape.input(vec![d, d], wk).unwrap(),
            w_val: tape.input(vec![d, d], wv).unwrap(),
        };
        let attn = vanilla_attention_matrix(&mut tape, x, &p).unwrap();
        let attn_mat = Mat::from_vec(n, n, tape.value(attn).to_vec());
        let resp = layer_frequency_response(&attn_mat, cfg.probes, seed ^ 0x5eed).unwrap();
        for (acc, r) in vanilla_mean.iter_mut().zip(resp.iter()) {
            *acc += r / trials as f64;
        }

        // AGF filters on the same input: the pass-through theta and an
        // alternating-sign high-frequency-leaning one.
        for (theta, acc) in [
            (
                FilterCoefficients::pass_through(4).theta().to_vec(),
                &mut agf_unit_mean,
            ),
            (
                (0..=3).map(|i| (-0.5f64).powi(i)).collect::<Vec<f64>>(),
                &mut agf_alt_mean,
            ),
        ] {
            let mut tape = Tape::new();
            let x = tape.input(vec![n, d], x_data.clone()).unwrap();
            let mut mk2 =
                |len: usize| -> Vec<f64> { (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect() };
            let p = AgfParams {
                w_u: tape.input(vec![d, d], mk2(d * d)).unwrap(),
                w_sigma: tape.input(vec![d, d], mk2(d * d)).unwrap(),
                w_v: tape.input(vec![d, d], mk2(d * d)).unwrap(),
                w_val: tape.input(vec![d, d], mk2(d * d)).unwrap(),
                theta: tape.input(vec![1, 4], theta).unwrap(),
                basis: BasisSpec::monomial(3),
            };
            let h = agf_materialize_h(&mut tape, x, &p).unwrap();
            let h_mat = Mat::from_vec(n, n, tape.value(h).to_vec());
            let resp = layer_frequency_response(&h_mat, cfg.probes, seed ^ 0xa1f).unwrap();
            for (a, r) in acc.iter_mut().zip(resp.iter()) {
                *a += r / trials as f64;
            }
        }
    }

    let slope = least_squares_slope(&vanilla_mean);
    let attenuates = slope < 0.0 && vanilla_mean[0] > *vanilla_mean.last().unwrap();
    report.verdicts.push(Verdict::new(
        "softmax_attention_response_attenuates_with_frequency",
        attenuates,
        json!({
            "trials": trials,
            "n": n,
            "d": d,
            "fitted_slope_per_bin": slope,
            "dc_response": vanilla_mean[0],
            "nyquist_response": vanilla_mean.last(),
        }),
    ));

    let csv_rows: Vec<Vec<f64>> = (0..bins)
        .map(|b| vec![b as f64, vanilla_mean[b], agf_unit_mean[b], agf_alt_mean[b]])
        .collect();
    report.artifacts.push("response_curves.csv".to_string());
    vec![(
        "response_curves.csv".to_string(),
        csv_from_rows("bin,vanilla,agf_pass_through,agf_alternating", &csv_rows),
    )]
}

/// Mean of each layer's token-similarity over all snapshot sequences.
pub fn mean_layer_cosine(snapshots: &[Vec<Mat>]) -> Vec<f64> {
    assert!(!snapshots.is_empty());
    let layers = snapshots[0].len();
    let mut acc = vec![0.0; layers];
    for layers_of_seq in snapshots {
        let cos = cosine_similarity_by_layer(layers_of_seq).expect("valid snapshot");
        for (a, m) in acc.iter_mut().zip(cos.means.iter()) {
            *a += m / snapshots.len() as f64;
        }
    }
    acc
}

fn run_oversmoothing(
    cfg: &SpectralFileConfig,
    seed: u64,
    report: &mut RunReport,
) -> Result<Vec<(String, String)>, HarnessError> {
    let dataset = gen_frequency_task(seed, cfg.os_samples, cfg.os_seq_len);
    let mut csv_rows = Vec::new();
    let mut vanilla_finals = Vec::new();
    let mut agf_finals = Vec::new();
    for &run_seed in &cfg.os_seeds {
        let mut per_variant = Vec::new();
        for variant in [AttentionVariant::Vanilla, AttentionVariant::Agf] {
            let config = TrainConfig {
                variant,
                d: cfg.os_d,
                heads: 2,
                layers: cfg.os_layers,
                basis: BasisSpec::jacobi(cfg.os_k, 0.0, 0.0)
                    .map_err(|e| HarnessError::Config(e.to_string()))?,
                gamma: cfg.os_gamma,
                lr: cfg.os_lr,
                epochs: cfg.os_epochs,
                batch_size: 32,
                seed: run_seed,
                freeze_theta: false,
            };
            let result = train(&config, &dataset)
                .map_err(|e| HarnessError::Config(format!("oversmoothing training failed: {e}")))?;
            per_variant.push(mean_layer_cosine(&result.snapshots));
        }
        let (vanilla_curve, agf_curve) = (&per_variant[0], &per_variant[1]);
        for layer in 0..cfg.os_layers {
            csv_rows.push(vec![
                run_seed as f64,
                layer as f64,
                vanilla_curve[layer],
                agf_curve[layer],
            ]);
        }
        vanilla_finals.push(*vanilla_curve.last().unwrap());
        agf_finals.push(*agf_curve.last().unwrap());
    }
    let vanilla_mean = vanilla_finals.iter().sum::<f64>() / vanilla_finals.len() as f64;
    let agf_mean = agf_finals.iter().sum::<f64>() / agf_finals.len() as f64;
    report.verdicts.push(Verdict::new(
        "agf_final_layer_similarity_below_vanilla",
        agf_mean < vanilla_mean,
        json!({
            "seeds": cfg.os_seeds,
            "layers": cfg.os_layers,
            "vanilla_final_mean": vanilla_mean,
            "agf_final_mean": agf_mean,
        }),
    ));
    report
        .artifacts
        .push("oversmoothing_cosine.csv".to_string());
    Ok(vec![(
        "oversmoothing_cosine.csv".to_string(),
        csv_from_rows("seed,layer,vanilla_cosine,agf_cosine", &csv_rows),
    )])
}

pub fn cmd_spectral(
    raw_config: &Value,
    seed_override: Option<u64>,
) -> Result<CommandOutput, HarnessError> {
    let cfg: SpectralFileConfig = serde_json::from_value(raw_config.clone())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let threads = thread_cap()?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let mut report = RunReport::new("spectral", seed, threads, raw_config.clone());
    let files = match cfg.mode.as_str() {
        "theorem1" => run_theorem1(&cfg, seed, &mut report),
        "theorem2" => run_theorem2(&cfg, seed, &mut report),
        "response" => run_response(&cfg, seed, &mut report),
        "oversmoothing" => run_oversmoothing(&cfg, seed, &mut report)?,
        other => {
            return Err(HarnessError::Config(format!(
                "unknown spectral mode '{other}' (expected theorem1, theorem2, response, or oversmoothing)"
            )))
        }
    };
    Ok(CommandOutput {
        reports: vec![(format!("spectral_{}_report.json", cfg.mode), report)],
        files,
    })
}

// ── gradcheck ────────────────────────────────────────────────────────

fn default_gc_n() -> usize {
    16
}
fn default_gc_d() -> usize {
    8
}
fn default_gc_heads() -> usize {
    2
}
fn default_gc_k() -> usize {
    3
}
fn default_gc_basis() -> String {
    "jacobi".to_string()
}
fn default_gc_gamma() -> f64 {
    0.1
}
fn default_gc_h() -> f64 {
    1e-5
}
fn default_gc_tolerance() -> f64 {
    1e-4
}
fn default_gc_batch() -> usize {
    2
}
fn default_gc_variant() -> String {
    "both".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckFileConfig {
    #[serde(default = "default_gc_n")]
    pub n: usize,
    #[serde(default = "default_gc_d")]
    pub d: usize,
    #[serde(default = "default_gc_heads")]
    pub heads: usize,
    #[serde(default = "default_gc_k", rename = "K")]
    pub k: usize,
    #[serde(default = "default_gc_basis")]
    pub basis: String,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default = "default_gc_gamma")]
    pub gamma: f64,
    #[serde(default = "default_gc_h")]
    pub h: f64,
    #[serde(default = "default_gc_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_gc_batch")]
    pub batch: usize,
    /// "agf", "vanilla", or "both".
    #[serde(default = "default_gc_variant")]
    pub variant: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

/// Build a model at the gradcheck scale, with theta nudged off its
/// pass-through start so every coefficient sees a generic loss surface.
pub fn gradcheck_model(
    variant: AttentionVariant,
    cfg: &GradcheckFileConfig,
    basis: BasisSpec,
    seed: u64,
) -> SequenceClassifier {
    let mut rng = Prng::new(seed);
    let mut model = SequenceClassifier::new(
        ModelConfig {
            features: 1,
            classes: 2,
            d: cfg.d,
            heads: cfg.heads,
            layers: 1,
            basis,
            variant,
            freeze_theta: false,
        },
        &mut rng,
    );
    for i in 0..model.store.len() {
        let p = model.store.get_mut(agf_core::model::ParamId(i));
        if p.name.ends_with("theta") {
            for v in p.value.iter_mut() {
                *v = rng.uniform(-0.5, 0.5);
            }
            p.value[0] += 1.0;
        }
    }
    model
}

pub fn cmd_gradcheck(
    raw_config: &Value,
    seed_override: Option<u64>,
) -> Result<CommandOutput, HarnessError> {
    let cfg: GradcheckFileConfig = serde_json::from_value(raw_config.clone())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let threads = thread_cap()?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let basis = parse_basis(&cfg.basis, cfg.k, cfg.a, cfg.b)?;
    let variants: Vec<AttentionVariant> = match cfg.variant.as_str() {
        "agf" => vec![AttentionVariant::Agf],
        "vanilla" => vec![AttentionVariant::Vanilla],
        "both" => vec![AttentionVariant::Agf, AttentionVariant::Vanilla],
        other => {
            return Err(HarnessError::Config(format!(
                "unknown gradcheck variant '{other}'"
            )))
        }
    };

    let dataset = gen_frequency_task(seed, cfg.batch.max(2) * 2, cfg.n.max(8));
    let indices: Vec<usize> = (0..cfg.batch).collect();
    let mut report = RunReport::new("gradcheck", seed, threads, raw_config.clone());
    for variant in variants {
        let name = match variant {
            AttentionVariant::Agf => "agf",
            AttentionVariant::Vanilla => "vanilla",
        };
        let mut model = gradcheck_model(variant, &cfg, basis, seed);
        let check = grad_check(
            &mut model,
            &dataset,
            &indices,
            cfg.gamma,
            cfg.h,
            cfg.tolerance,
        )
        .map_err(|e| HarnessError::Config(e.to_string()))?;
        let per_param: Vec<Value> = check
            .checks
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "max_rel_err": c.max_rel_err,
                })
            })
            .collect();
        report.verdicts.push(Verdict::new(
            format!("gradients_match_finite_differences_{name}"),
            check.passed(),
            json!({
                "max_rel_err": check.max_rel_err,
                "tolerance": check.tolerance,
                "h": cfg.h,
                "parameters": per_param,
            }),
        ));
    }
    Ok(CommandOutput {
        reports: vec![("gradcheck_report.json".to_string(), report)],
        files: Vec::new(),
    })
}
