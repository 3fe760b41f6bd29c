//! Acceptance suite: one test per claim the artifact must uphold, each
//! printing a PASS line with its measured evidence (run with
//! `--nocapture` to see them). Tests serialize on a global lock so the
//! timing-sensitive ones never share the machine.

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use agf_core::attention::{agf_forward, agf_materialize_h, ortho_loss, AgfParams};
use agf_core::model::AttentionVariant;
use agf_core::poly::{apply_filter_scalar, jacobi_eval, BasisSpec, FilterCoefficients};
use agf_core::spectral::{filter_response, lowpass_trajectory};
use agf_core::tensor::Tape;
use agf_core::training::{
    gen_frequency_task, grad_check, train, Dataset, EpochMetrics, TrainConfig,
};
use agf_core::Prng;
use agf_harness::bench::{
    check_no_quadratic_intermediate, measure_variant, slope_of, BenchVariant,
};
use agf_harness::commands::{
    gradcheck_model, mean_layer_cosine, random_simplex_theta, random_softmax_matrix,
    GradcheckFileConfig, AGF_SLOPE_BAND, VANILLA_SLOPE_BAND,
};

fn lock() -> std::sync::MutexGuard<'static, ()> {
    static GATE: Mutex<()> = Mutex::new(());
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

// ── Shared criterion-7 protocol ──────────────────────────────────────

const C7_SEEDS: [u64; 3] = [0, 1, 2];
const C7_EPOCHS: usize = 30;
const C7_ACCURACY_FLOOR: f64 = 0.95;

/// 2500 samples split 2000/500 by the generator's 80/20 rule, one dataset
/// per seed.
fn c7_dataset(seed: u64) -> Dataset {
    gen_frequency_task(seed, 2500, 64)
}

fn c7_config(seed: u64, gamma: f64, freeze_theta: bool) -> TrainConfig {
    TrainConfig {
        variant: AttentionVariant::Agf,
        d: 16,
        heads: 2,
        layers: 1,
        basis: BasisSpec::jacobi(4, 0.0, 0.0).unwrap(),
        gamma,
        lr: 3e-3,
        epochs: C7_EPOCHS,
        batch_size: 32,
        seed,
        freeze_theta,
    }
}

/// Seed-0 criterion-7 history, trained once and shared between the
/// frequency-task and determinism criteria.
fn c7_seed0_history() -> &'static Vec<EpochMetrics> {
    static HISTORY: OnceLock<Vec<EpochMetrics>> = OnceLock::new();
    HISTORY.get_or_init(|| {
        train(&c7_config(0, 0.01, false), &c7_dataset(0))
            .expect("criterion-7 training must run")
            .history
    })
}

fn best_test_accuracy(history: &[EpochMetrics]) -> f64 {
    history
        .iter()
        .map(|m| m.test_accuracy)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn metrics_trace(history: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.train_accuracy, m.test_accuracy, m.task_loss, m.ortho_loss
        ));
    }
    out
}

// ── Criteria ─────────────────────────────────────────────────────────

/// Autodiff against central finite differences (h = 1e-5) on every
/// parameter of a 1-layer AGF model (n=16, d=8, heads=2, K=3, Jacobi
/// a=b=0, gamma=0.1): max relative error below 1e-4.
#[test]
fn criterion_01_gradient_correctness() {
    let _gate = lock();
    let started = Instant::now();
    let cfg: GradcheckFileConfig = serde_json::from_value(serde_json::json!({})).unwrap();
    let basis = BasisSpec::jacobi(3, 0.0, 0.0).unwrap();
    let dataset = gen_frequency_task(0, 4, 16);
    let mut model = gradcheck_model(AttentionVariant::Agf, &cfg, basis, 0);
    let report = grad_check(&mut model, &dataset, &[0, 1], 0.1, 1e-5, 1e-4).unwrap();
    let worst = report
        .checks
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
        .unwrap();
    assert!(
        report.passed(),
        "max relative error {} (at {}) exceeds 1e-4",
        report.max_rel_err,
        worst.name
    );
    println!(
        "ACCEPTANCE 01 gradient_correctness: PASS (max_rel_err={:.3e} across {} tensors, worst={}, {:.1}s)",
        report.max_rel_err,
        report.checks.len(),
        worst.name,
        started.elapsed().as_secs_f64()
    );
}

/// The linear-cost contraction equals the materialized n x n filter path
/// within 1e-10 over 100 random instances with n <= 32, d <= 8, K <= 5.
#[test]
fn criterion_02_oracle_equivalence() {
    let _gate = lock();
    let started = Instant::now();
    let mut rng = Prng::new(42);
    let mut max_diff: f64 = 0.0;
    for trial in 0..100 {
        let n = 1 + rng.below(32);
        let d = 1 + rng.below(8);
        let k = rng.below(6);
        let basis = if trial % 2 == 0 {
            BasisSpec::monomial(k)
        } else {
            BasisSpec::jacobi(k, 1.0, 1.0).unwrap()
        };
        let mut tape = Tape::new();
        let mut mk =
            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.uniform(-2.0, 2.0)).collect() };
        let p = AgfParams {
            w_u: tape.param(vec![d, d], mk(d * d)).unwrap(),
            w_sigma: tape.param(vec![d, d], mk(d * d)).unwrap(),
            w_v: tape.param(vec![d, d], mk(d * d)).unwrap(),
            w_val: tape.param(vec![d, d], mk(d * d)).unwrap(),
            theta: tape.param(vec![1, k + 1], mk(k + 1)).unwrap(),
            basis,
        };
        let x = tape.input(vec![n, d], mk(n * d)).unwrap();
        let fast = agf_forward(&mut tape, x, &p).unwrap();
        let h = agf_materialize_h(&mut tape, x, &p).unwrap();
        let xval = tape.matmul(x, p.w_val).unwrap();
        let slow = tape.matmul(h, xval).unwrap();
        for (a, b) in tape.value(fast).iter().zip(tape.value(slow).iter()) {
            let diff = (a - b).abs();
            max_diff = max_diff.max(diff);
            assert!(
                diff < 1e-10,
                "trial {trial} (n={n}, d={d}, K={k}): diff {diff}"
            );
        }
    }
    println!(
        "ACCEPTANCE 02 oracle_equivalence: PASS (100 instances, max_abs_diff={:.3e}, {:.1}s)",
        max_diff,
        started.elapsed().as_secs_f64()
    );
}

/// Repeated application of a softmax matrix acts as a low-pass filter:
/// for 10 seeded random softmax matrices (n=32, c=1) the HFC/LFC ratio at
/// t=64 is below 1e-3 and below its t=1 value in every trial.
#[test]
fn criterion_03_softmax_is_low_pass() {
    let _gate = lock();
    let started = Instant::now();
    let mut worst_final: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = Prng::new(seed);
        let m = random_softmax_matrix(32, &mut rng);
        let x: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ratios = lowpass_trajectory(&m, &x, 64, 1).unwrap();
        let (first, last) = (ratios[0], ratios[63]);
        worst_final = worst_final.max(last);
        assert!(last < 1e-3, "seed {seed}: ratio at t=64 is {last}");
        assert!(
            last < first,
            "seed {seed}: ratio did not decay ({first} -> {last})"
        );
    }
    println!(
        "ACCEPTANCE 03 softmax_low_pass: PASS (10 trials, worst t=64 ratio {:.3e}, {:.2}s)",
        worst_final,
        started.elapsed().as_secs_f64()
    );
}

/// Filter coefficient classes behave per theory: (a) 1000 random
/// simplex-constrained non-negative coefficient vectors (K <= 8) give
/// ratios < 1 over spectra with lambda_1 = 1, |lambda_i| < 1; (b)
/// alternating geometric coefficients (alpha in {0.5, 0.9}, K = 200)
/// give ratios > 1 and match 1/(1 + alpha lambda) within 1e-6.
#[test]
fn criterion_04_filter_coefficient_classes() {
    let _gate = lock();
    let started = Instant::now();
    let mut rng = Prng::new(7);
    let mut grid = vec![1.0];
    let mut l = -0.95;
    while l < 0.955 {
        grid.push(l);
        l += 0.05;
    }

    for trial in 0..1000 {
        let k = 1 + rng.below(8);
        let theta = FilterCoefficients::new(random_simplex_theta(k, &mut rng));
        let basis = BasisSpec::monomial(k);
        let resp = filter_response(&theta, &basis, &grid).unwrap();
        for (i, &r) in resp.ratios.iter().enumerate().skip(1) {
            assert!(
                r < 1.0,
                "trial {trial}: simplex theta gave ratio {r} at lambda {}",
                resp.lambdas[i]
            );
        }
    }

    let mut worst_err: f64 = 0.0;
    for &alpha in &[0.5f64, 0.9] {
        let theta: Vec<f64> = (0..=200).map(|i| (-alpha).powi(i as i32)).collect();
        let theta = FilterCoefficients::new(theta);
        let basis = BasisSpec::monomial(200);
        let resp = filter_response(&theta, &basis, &grid).unwrap();
        for (i, &lambda) in resp.lambdas.iter().enumerate() {
            let closed = 1.0 / (1.0 + alpha * lambda);
            let err = (resp.responses[i] - closed).abs();
            worst_err = worst_err.max(err);
            assert!(
                err < 1e-6,
                "alpha={alpha} lambda={lambda}: response {} vs closed form {closed}",
                resp.responses[i]
            );
            if i > 0 {
                assert!(
                    resp.ratios[i] > 1.0,
                    "alpha={alpha} lambda={lambda}: ratio {} not high-pass",
                    resp.ratios[i]
                );
            }
        }
    }
    println!(
        "ACCEPTANCE 04 filter_coefficient_classes: PASS (1000 low-pass draws, closed-form err {:.3e} <= 1e-6, {:.2}s)",
        worst_err,
        started.elapsed().as_secs_f64()
    );
}

/// The Jacobi recurrence agrees with its symbolic monomial expansion to
/// 1e-10 on a 101-point grid over [0, 1] for K <= 6 and
/// (a, b) in {(0,0), (1,1), (1.5,-0.5)}.
#[test]
fn criterion_05_jacobi_fidelity() {
    let _gate = lock();
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for &(a, b) in &[(0.0, 0.0), (1.0, 1.0), (1.5, -0.5)] {
        // Symbolic expansion by polynomial arithmetic on coefficients.
        let mut polys: Vec<Vec<f64>> = vec![vec![1.0], vec![(a - b) / 2.0, (a + b + 2.0) / 2.0]];
        for k in 2..=6usize {
            let kf = k as f64;
            let s = a + b;
            let w = (2.0 * kf + s) * (2.0 * kf + s + 1.0) / (2.0 * kf * (kf + s));
            let w_prime = (2.0 * kf + s - 1.0) * (a * a - b * b)
                / (2.0 * kf * (kf + s) * (2.0 * kf + s - 2.0));
            let w_dprime = (kf + a - 1.0) * (kf + b - 1.0) * (2.0 * kf + s)
                / (kf * (kf + s) * (2.0 * kf + s - 2.0));
            let mut next = vec![0.0; k + 1];
            for (i, &c) in polys[k - 1].iter().enumerate() {
                next[i + 1] += w * c;
                next[i] += w_prime * c;
            }
            for (i, &c) in polys[k - 2].iter().enumerate() {
                next[i] -= w_dprime * c;
            }
            polys.push(next);
        }
        for (k, coeffs) in polys.iter().enumerate() {
            let theta = FilterCoefficients::new(coeffs.clone());
            let monomial = BasisSpec::monomial(k);
            for step in 0..=100 {
                let x = step as f64 / 100.0;
                let via_expansion = apply_filter_scalar(&theta, &monomial, x).unwrap();
                let via_recurrence = jacobi_eval(k, a, b, x).unwrap();
                let diff = (via_expansion - via_recurrence).abs();
                worst = worst.max(diff);
                assert!(
                    diff < 1e-10,
                    "k={k} a={a} b={b} x={x}: {via_expansion} vs {via_recurrence}"
                );
            }
        }
    }
    println!(
        "ACCEPTANCE 05 jacobi_fidelity: PASS (3 parameter pairs, K<=6, 101-point grid, worst diff {:.3e}, {:.2}s)",
        worst,
        started.elapsed().as_secs_f64()
    );
}

/// Wall-clock scaling at d=64 over n in {512, ..., 8192}: the AGF
/// forward's log-log slope lies in [0.8, 1.3], the softmax baseline's in
/// [1.7, 2.2], and the AGF path never allocates an n x n intermediate.
#[test]
fn criterion_06_complexity_scaling() {
    let _gate = lock();
    let started = Instant::now();
    let n_list = [512usize, 1024, 2048, 4096, 8192];
    let d = 64;
    let basis = BasisSpec::monomial(3);

    let (agf_cells, agf_notes) = measure_variant(BenchVariant::Agf, &n_list, d, 7, 2, basis, 0);
    let (van_cells, van_notes) = measure_variant(BenchVariant::Vanilla, &n_list, d, 7, 2, basis, 0);
    assert!(
        agf_cells.len() >= 2 && van_cells.len() >= 2,
        "too many timing points dropped: {agf_notes:?} {van_notes:?}"
    );

    let agf = slope_of(&agf_cells, BenchVariant::Agf, 0);
    let van = slope_of(&van_cells, BenchVariant::Vanilla, 0);
    let max_numel = check_no_quadratic_intermediate(8192, d, basis, 0)
        .expect("no quadratic intermediate may appear");

    assert!(
        agf.slope >= AGF_SLOPE_BAND.0 && agf.slope <= AGF_SLOPE_BAND.1,
        "agf slope {} outside {AGF_SLOPE_BAND:?}",
        agf.slope
    );
    assert!(
        van.slope >= VANILLA_SLOPE_BAND.0 && van.slope <= VANILLA_SLOPE_BAND.1,
        "vanilla slope {} outside {VANILLA_SLOPE_BAND:?}",
        van.slope
    );
    println!(
        "ACCEPTANCE 06 complexity_scaling: PASS (agf slope {:.3} ci [{:.3},{:.3}], vanilla slope {:.3} ci [{:.3},{:.3}], max intermediate {} <= {}, {:.0}s)",
        agf.slope,
        agf.ci_low,
        agf.ci_high,
        van.slope,
        van.ci_low,
        van.ci_high,
        max_numel,
        basis.coeff_len() * 8192 * d,
        started.elapsed().as_secs_f64()
    );
}

/// A 1-layer AGF model (d=16, K=4, gamma=0.01) reaches at least 95% test
/// accuracy on the synthetic frequency task (2000/500 split) within the
/// epoch budget for seeds 0..2, and the theta-frozen U V^T ablation
/// scores strictly lower on every seed.
#[test]
fn criterion_07_frequency_task_learning() {
    let _gate = lock();
    let started = Instant::now();
    let mut summary = Vec::new();
    for &seed in &C7_SEEDS {
        let dataset = c7_dataset(seed);
        let agf_history = if seed == 0 {
            c7_seed0_history().clone()
        } else {
            train(&c7_config(seed, 0.01, false), &dataset)
                .unwrap()
                .history
        };
        let ablation_history = train(&c7_config(seed, 0.01, true), &dataset)
            .unwrap()
            .history;
        let agf_best = best_test_accuracy(&agf_history);
        let ablation_best = best_test_accuracy(&ablation_history);
        assert!(
            agf_best >= C7_ACCURACY_FLOOR,
            "seed {seed}: AGF best accuracy {agf_best} below {C7_ACCURACY_FLOOR}"
        );
        assert!(
            ablation_best < agf_best,
            "seed {seed}: frozen-theta ablation ({ablation_best}) not strictly below AGF ({agf_best})"
        );
        summary.push(format!(
            "seed {seed}: agf {agf_best:.3} > ablation {ablation_best:.3}"
        ));
    }
    println!(
        "ACCEPTANCE 07 frequency_task_learning: PASS ({}; {:.0}s)",
        summary.join("; "),
        started.elapsed().as_secs_f64()
    );
}

/// Over-smoothing probe: with 4-layer models on the frequency task, the
/// AGF final-layer mean pairwise cosine similarity is strictly below the
/// softmax baseline's, averaged over seeds 0..2.
#[test]
fn criterion_08_over_smoothing_probe() {
    let _gate = lock();
    let started = Instant::now();
    let dataset = gen_frequency_task(99, 800, 64);
    let mut vanilla_finals = Vec::new();
    let mut agf_finals = Vec::new();
    for &seed in &C7_SEEDS {
        for variant in [AttentionVariant::Vanilla, AttentionVariant::Agf] {
            // gamma = 0.1: the orthogonality pressure keeps the generated
            // singular vectors differentiated after the task is mastered,
            // which is exactly the anti-smoothing mechanism under test.
            let config = TrainConfig {
                variant,
                d: 16,
                heads: 2,
                layers: 4,
                basis: BasisSpec::jacobi(4, 0.0, 0.0).unwrap(),
                gamma: 0.1,
                lr: 3e-3,
                epochs: 20,
                batch_size: 32,
                seed,
                freeze_theta: false,
            };
            let result = train(&config, &dataset).unwrap();
            let curve = mean_layer_cosine(&result.snapshots);
            match variant {
                AttentionVariant::Vanilla => vanilla_finals.push(*curve.last().unwrap()),
                AttentionVariant::Agf => agf_finals.push(*curve.last().unwrap()),
            }
        }
    }
    let vanilla_mean = vanilla_finals.iter().sum::<f64>() / vanilla_finals.len() as f64;
    let agf_mean = agf_finals.iter().sum::<f64>() / agf_finals.len() as f64;
    assert!(
        agf_mean < vanilla_mean,
        "AGF final-layer cosine {agf_mean} not below vanilla {vanilla_mean}"
    );
    println!(
        "ACCEPTANCE 08 over_smoothing_probe: PASS (agf {:.3} < vanilla {:.3} over seeds {:?}, {:.0}s)",
        agf_mean,
        vanilla_mean,
        C7_SEEDS,
        started.elapsed().as_secs_f64()
    );
}

/// The orthogonality penalty is exactly zero on orthonormal fixtures, and
/// under gamma = 0.1 its 10-epoch moving average at the end of training
/// sits below its epoch-1 value.
#[test]
fn criterion_09_orthogonality_regularization() {
    let _gate = lock();
    let started = Instant::now();

    let mut tape = Tape::new();
    let u = tape
        .input(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        .unwrap();
    let vt = tape
        .input(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        .unwrap();
    let fixture = ortho_loss(&mut tape, u, vt).unwrap();
    assert_eq!(
        tape.scalar_value(fixture),
        0.0,
        "orthonormal fixture must give exactly zero"
    );

    let mut summary = Vec::new();
    for &seed in &C7_SEEDS {
        let history = train(&c7_config(seed, 0.1, false), &c7_dataset(seed))
            .unwrap()
            .history;
        let first = history[0].ortho_loss;
        let tail: Vec<f64> = history
            .iter()
            .rev()
            .take(10)
            .map(|m| m.ortho_loss)
            .collect();
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            tail_mean < first,
            "seed {seed}: final 10-epoch mean {tail_mean:.6} is not below the epoch-1 value \
             {first:.6}. Known limitation: softmax rows are strictly positive, so for n > d \
             the penalty has a positive floor and the near-uniform init starts at it; task \
             learning sharpens the singular vectors and raises the penalty, and at gamma=0.1 \
             (further scaled by 1/n^2) the pull back is too weak to recover within the epoch \
             budget. The regularizer itself works: see the gamma=10 trend test in the training \
             module."
        );
        summary.push(format!("seed {seed}: {first:.4} -> {tail_mean:.4}"));
    }
    println!(
        "ACCEPTANCE 09 orthogonality_regularization: PASS (fixture exactly 0; {}; {:.0}s)",
        summary.join("; "),
        started.elapsed().as_secs_f64()
    );
}

/// Re-running the criterion-7 protocol with the same seed reproduces the
/// metric trace bit for bit.
#[test]
fn criterion_10_determinism() {
    let _gate = lock();
    let started = Instant::now();
    let first = metrics_trace(c7_seed0_history());
    let repeat_history = train(&c7_config(0, 0.01, false), &c7_dataset(0))
        .unwrap()
        .history;
    let second = metrics_trace(&repeat_history);
    assert_eq!(first, second, "metric traces differ between identical runs");
    println!(
        "ACCEPTANCE 10 determinism: PASS (bit-identical {}-epoch traces, {:.0}s)",
        repeat_history.len(),
        started.elapsed().as_secs_f64()
    );
}
