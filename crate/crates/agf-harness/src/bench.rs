//! Wall-clock scaling measurements for the two attention paths, plus the
//! log-log slope fitting used to verify the linear-versus-quadratic cost
//! claim.
//!
//! Timing policy: a monotonic clock, a fixed number of warmup iterations
//! that are discarded, and the median over the remaining repeats as the
//! representative value (mean and standard deviation are reported too).
//! Points whose median falls below 100x the measured timer resolution are
//! dropped with a note instead of polluting the fit.

use std::time::Instant;

use agf_core::attention::{agf_forward, vanilla_sa, AgfParams, VanillaParams};
use agf_core::poly::BasisSpec;
use agf_core::tensor::Tape;
use agf_core::Prng;

use crate::report::{BenchRow, SlopeFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchVariant {
    Agf,
    Vanilla,
}

impl BenchVariant {
    pub fn name(&self) -> &'static str {
        match self {
            BenchVariant::Agf => "agf",
            BenchVariant::Vanilla => "vanilla",
        }
    }
}

/// Raw repeats for one (variant, n) cell.
#[derive(Debug, Clone)]
pub struct BenchCell {
    pub variant: BenchVariant,
    pub n: usize,
    pub seconds: Vec<f64>,
}

impl BenchCell {
    pub fn median(&self) -> f64 {
        let mut v = self.seconds.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    pub fn mean(&self) -> f64 {
        self.seconds.iter().sum::<f64>() / self.seconds.len() as f64
    }

    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .seconds
            .iter()
            .map(|s| (s - mean) * (s - mean))
            .sum::<f64>()
            / self.seconds.len() as f64;
        var.sqrt()
    }

    pub fn to_row(&self) -> BenchRow {
        BenchRow {
            variant: self.variant.name().to_string(),
            n: self.n,
            mean_s: self.mean(),
            std_s: self.std(),
            median_s: self.median(),
        }
    }
}

/// Smallest positive gap two back-to-back monotonic clock reads can show.
pub fn timer_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..256 {
        let a = Instant::now();
        let b = Instant::now();
        let delta = b.duration_since(a).as_secs_f64();
        if delta > 0.0 && delta < best {
            best = delta;
        }
    }
    if best.is_finite() {
        best
    } else {
        1e-9
    }
}

fn random_vec(rng: &mut Prng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.uniform(-scale, scale)).collect()
}

/// One timed forward pass. Tape construction is part of the measured cost;
/// input and weight value generation is not.
fn run_once(
    variant: BenchVariant,
    x_data: &[f64],
    weights: &[Vec<f64>],
    theta: &[f64],
    n: usize,
    d: usize,
    basis: BasisSpec,
) -> (f64, Tape) {
    let start = Instant::now();
    let mut tape = Tape::new();
    let x = tape.input(vec![n, d], x_data.to_vec()).unwrap();
    let out = match variant {
        BenchVariant::Agf => {
            let p = AgfParams {
                w_u: tape.input(vec![d, d], weights[0].clone()).unwrap(),
                w_sigma: tape.input(vec![d, d], weights[1].clone()).unwrap(),
                w_v: tape.input(vec![d, d], weights[2].clone()).unwrap(),
                w_val: tape.input(vec![d, d], weights[3].clone()).unwrap(),
                theta: tape.input(vec![1, theta.len()], theta.to_vec()).unwrap(),
                basis,
            };
            agf_forward(&mut tape, x, &p).unwrap()
        }
        BenchVariant::Vanilla => {
            let p = VanillaParams {
                w_qry: tape.input(vec![d, d], weights[0].clone()).unwrap(),
                w_key: tape.input(vec![d, d], weights[1].clone()).unwrap(),
                w_val: tape.input(vec![d, d], weights[2].clone()).unwrap(),
            };
            vanilla_sa(&mut tape, x, &p).unwrap()
        }
    };
    let elapsed = start.elapsed().as_secs_f64();
    std::hint::black_box(tape.value(out)[0]);
    (elapsed, tape)
}

/// Every intermediate of one AGF forward stays O(n d) for fixed filter
/// order; in particular nothing of shape n x n is ever allocated. Returns
/// the offending shape if the claim is violated.
pub fn check_no_quadratic_intermediate(
    n: usize,
    d: usize,
    basis: BasisSpec,
    seed: u64,
) -> Result<usize, String> {
    let mut rng = Prng::new(seed);
    let weights: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, d * d, 1.0)).collect();
    let theta = random_vec(&mut rng, basis.coeff_len(), 1.0);
    let x_data = random_vec(&mut rng, n * d, 1.0);
    let (_, tape) = run_once(BenchVariant::Agf, &x_data, &weights, &theta, n, d, basis);
    let budget = basis.coeff_len() * n * d;
    let mut max_numel = 0usize;
    for shape in tape.recorded_shapes() {
        let numel: usize = shape.iter().product();
        max_numel = max_numel.max(numel);
        if shape.len() == 2 && shape[0] == n && shape[1] == n && n > d {
            return Err(format!("allocated an {n} x {n} intermediate"));
        }
        if numel > budget.max(d * d) {
            return Err(format!(
                "intermediate of shape {shape:?} exceeds the O(nd) budget {budget}"
            ));
        }
    }
    Ok(max_numel)
}

/// Time one variant across token counts. Returns kept cells and notes for
/// the dropped ones.
pub fn measure_variant(
    variant: BenchVariant,
    n_list: &[usize],
    d: usize,
    repeats: usize,
    warmups: usize,
    basis: BasisSpec,
    seed: u64,
) -> (Vec<BenchCell>, Vec<String>) {
    let resolution = timer_resolution();
    let mut rng = Prng::new(seed);
    let weights: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, d * d, 1.0)).collect();
    let theta = random_vec(&mut rng, basis.coeff_len(), 1.0);

    let mut cells = Vec::new();
    let mut dropped = Vec::new();
    for &n in n_list {
        let x_data = random_vec(&mut rng, n * d, 1.0);
        for _ in 0..warmups {
            run_once(variant, &x_data, &weights, &theta, n, d, basis);
        }
        let seconds: Vec<f64> = (0..repeats)
            .map(|_| run_once(variant, &x_data, &weights, &theta, n, d, basis).0)
            .collect();
        let cell = BenchCell {
            variant,
            n,
            seconds,
        };
        if cell.median() < 100.0 * resolution {
            dropped.push(format!(
                "{} n={n}: median {:.3e}s below 100x timer resolution {:.3e}s, point dropped",
                variant.name(),
                cell.median(),
                resolution
            ));
        } else {
            cells.push(cell);
        }
    }
    (cells, dropped)
}

/// Least-squares slope of log(time) against log(n).
pub fn fit_loglog_slope(ns: &[f64], times: &[f64]) -> f64 {
    assert_eq!(ns.len(), times.len());
    assert!(ns.len() >= 2, "need at least two points to fit a slope");
    let xs: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = times.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    num / den
}

/// Percentile bootstrap over the per-n repeats: resample each cell's
/// repeats with replacement, refit the slope of medians, and take the
/// 2.5/97.5 percentiles over 200 resamples.
pub fn bootstrap_slope_ci(cells: &[BenchCell], seed: u64) -> (f64, f64) {
    let mut rng = Prng::new(seed);
    let resamples = 200;
    let mut slopes = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut ns = Vec::with_capacity(cells.len());
        let mut meds = Vec::with_capacity(cells.len());
        for cell in cells {
            let mut sample: Vec<f64> = (0..cell.seconds.len())
                .map(|_| cell.seconds[rng.below(cell.seconds.len())])
                .collect();
            sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ns.push(cell.n as f64);
            meds.push(sample[sample.len() / 2]);
        }
        slopes.push(fit_loglog_slope(&ns, &meds));
    }
    slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = slopes[(resamples as f64 * 0.025) as usize];
    let hi = slopes[((resamples as f64 * 0.975) as usize).min(resamples - 1)];
    (lo, hi)
}

/// Fit the slope of one variant's cells and bootstrap its interval.
pub fn slope_of(cells: &[BenchCell], variant: BenchVariant, seed: u64) -> SlopeFit {
    let ns: Vec<f64> = cells.iter().map(|c| c.n as f64).collect();
    let meds: Vec<f64> = cells.iter().map(|c| c.median()).collect();
    let slope = fit_loglog_slope(&ns, &meds);
    let (ci_low, ci_high) = bootstrap_slope_ci(cells, seed);
    SlopeFit {
        variant: variant.name().to_string(),
        slope,
        ci_low,
        ci_high,
    }
}
