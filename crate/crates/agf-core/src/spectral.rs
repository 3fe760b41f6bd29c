//! Frequency-domain analysis: unitary DFT, low/high-frequency splits,
//! repeated-smoothing trajectories, polynomial filter response curves, and
//! the token-similarity probes used to study over-smoothing.
//!
//! The DFT is the direct O(n^2) evaluation of the unitary transform with
//! 1/sqrt(n) normalization; at the scales analyzed here (n <= ~4096) fidelity
//! and simplicity beat FFT speed. Frequencies are ordered by distance from
//! DC: bin 0 first, then the conjugate pair {1, n-1}, then {2, n-2}, and so
//! on, so a cutoff of c keeps the c bins closest to DC.

use std::fmt;

use num_complex::Complex64;

use crate::mat::Mat;
use crate::poly::{apply_filter_scalar, BasisSpec, FilterCoefficients, PolyError};
use crate::prng::Prng;

#[derive(Debug, Clone, PartialEq)]
pub enum SpectralError {
    /// Cutoff must satisfy 1 <= c <= n.
    CutoffOutOfRange { c: usize, n: usize },
    /// The matrix is not row-stochastic with positive entries.
    NotStochastic,
    /// The leading response g(lambda_1) vanished, so ratios are undefined.
    DegenerateFilter,
    /// Singular values must satisfy lambda_1 = 1 and |lambda_i| < 1.
    BadSpectrum { detail: String },
    /// Filter evaluation failed.
    Poly(PolyError),
    /// Need at least this many tokens/layers.
    TooSmall { detail: String },
}

impl fmt::Display for SpectralError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralError::CutoffOutOfRange { c, n } => {
                write!(f, "cutoff {c} out of range 1..={n}")
            }
            SpectralError::NotStochastic => {
                write!(f, "matrix rows must be positive and sum to 1")
            }
            SpectralError::DegenerateFilter => write!(f, "filter response vanishes at lambda_1"),
            SpectralError::BadSpectrum { detail } => write!(f, "bad spectrum: {detail}"),
            SpectralError::Poly(e) => write!(f, "{e}"),
            SpectralError::TooSmall { detail } => write!(f, "{detail}"),
        }
    }
}

impl std::error::Error for SpectralError {}

impl From<PolyError> for SpectralError {
    fn from(e: PolyError) -> Self {
        SpectralError::Poly(e)
    }
}

/// Unitary DFT: spectrum_j = (1/sqrt(n)) sum_k x_k e^{-2 pi i j k / n}.
pub fn dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let norm = 1.0 / (n as f64).sqrt();
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    for (j, out) in spectrum.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &v) in x.iter().enumerate() {
            let angle = -2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64;
            acc += Complex64::new(angle.cos(), angle.sin()) * v;
        }
        *out = acc * norm;
    }
    spectrum
}

/// Inverse of [`dft`]; returns the real part (inputs here are spectra of
/// real signals or masked versions of them).
pub fn idft(spectrum: &[Complex64]) -> Vec<f64> {
    let n = spectrum.len();
    let norm = 1.0 / (n as f64).sqrt();
    let mut x = vec![0.0; n];
    for (k, out) in x.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &s) in spectrum.iter().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64;
            acc += s * Complex64::new(angle.cos(), angle.sin());
        }
        *out = (acc * norm).re;
    }
    x
}

/// Bin indices ordered by distance from DC: 0, 1, n-1, 2, n-2, ...
/// Conjugate partners are adjacent so real reconstructions keep pairs
/// together.
pub fn frequency_order(n: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(n);
    order.push(0);
    let mut lo = 1;
    let mut hi = n - 1;
    while lo < hi {
        order.push(lo);
        order.push(hi);
        lo += 1;
        hi -= 1;
    }
    if lo == hi {
        order.push(lo);
    }
    order
}

/// A signal split into its c lowest-frequency bins and the rest.
#[derive(Debug, Clone)]
pub struct SpectrumSplit {
    pub lfc: Vec<f64>,
    pub hfc: Vec<f64>,
    pub cutoff_c: usize,
}

/// Split `x` by zeroing all but the `c` lowest-frequency bins (LFC) or all
/// but the remaining bins (HFC). The two parts always sum back to `x`.
pub fn lfc_hfc_split(x: &[f64], c: usize) -> Result<SpectrumSplit, SpectralError> {
    let n = x.len();
    if c < 1 || c > n {
        return Err(SpectralError::CutoffOutOfRange { c, n });
    }
    let spectrum = dft(x);
    let order = frequency_order(n);
    let mut low = vec![Complex64::new(0.0, 0.0); n];
    let mut high = vec![Complex64::new(0.0, 0.0); n];
    for (rank, &bin) in order.iter().enumerate() {
        if rank < c {
            low[bin] = spectrum[bin];
        } else {
            high[bin] = spectrum[bin];
        }
    }
    Ok(SpectrumSplit {
        lfc: idft(&low),
        hfc: idft(&high),
        cutoff_c: c,
    })
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Ratio ||HFC[M^t x]|| / ||LFC[M^t x]|| for t = 1..=steps. A vanishing
/// LFC denominator reports +infinity rather than NaN.
pub fn lowpass_trajectory(
    m: &Mat,
    x: &[f64],
    steps: usize,
    c: usize,
) -> Result<Vec<f64>, SpectralError> {
    if !m.is_row_stochastic(1e-9) {
        return Err(SpectralError::NotStochastic);
    }
    if x.len() != m.cols() {
        return Err(SpectralError::TooSmall {
            detail: format!("signal length {} vs matrix size {}", x.len(), m.cols()),
        });
    }
    let mut current = x.to_vec();
    let mut ratios = Vec::with_capacity(steps);
    for _ in 1..=steps {
        current = m.matvec(&current);
        let split = lfc_hfc_split(&current, c)?;
        let denom = norm2(&split.lfc);
        let num = norm2(&split.hfc);
        ratios.push(if denom == 0.0 {
            f64::INFINITY
        } else {
            num / denom
        });
    }
    Ok(ratios)
}

/// Polynomial filter evaluated over a singular-value spectrum.
#[derive(Debug, Clone)]
pub struct FilterResponse {
    /// Sorted descending; lambda_1 = 1 leads.
    pub lambdas: Vec<f64>,
    /// g_theta(lambda_i).
    pub responses: Vec<f64>,
    /// |g(lambda_i) / g(lambda_1)|; index 0 is 1 by construction.
    pub ratios: Vec<f64>,
}

/// Evaluate g_theta over a spectrum with lambda_1 = 1 and |lambda_i| < 1
/// for the rest. Ratios above/below 1 classify the filter as
/// high-pass/low-pass over that spectrum.
pub fn filter_response(
    theta: &FilterCoefficients,
    basis: &BasisSpec,
    lambdas: &[f64],
) -> Result<FilterResponse, SpectralError> {
    if lambdas.is_empty() {
        return Err(SpectralError::BadSpectrum {
            detail: "empty spectrum".to_string(),
        });
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if (sorted[0] - 1.0).abs() > 1e-12 {
        return Err(SpectralError::BadSpectrum {
            detail: format!("leading singular value must be 1, got {}", sorted[0]),
        });
    }
    if sorted[1..].iter().any(|&l| l.abs() >= 1.0) {
        return Err(SpectralError::BadSpectrum {
            detail: "trailing singular values must have magnitude below 1".to_string(),
        });
    }
    let responses: Result<Vec<f64>, PolyError> = sorted
        .iter()
        .map(|&l| apply_filter_scalar(theta, basis, l))
        .collect();
    let responses = responses?;
    let lead = responses[0];
    if lead == 0.0 {
        return Err(SpectralError::DegenerateFilter);
    }
    let ratios = responses.iter().map(|&r| (r / lead).abs()).collect();
    Ok(FilterResponse {
        lambdas: sorted,
        responses,
        ratios,
    })
}

/// Per-layer mean pairwise cosine similarity across tokens.
#[derive(Debug, Clone)]
pub struct CosineByLayer {
    pub means: Vec<f64>,
    /// Pairs skipped per layer because a token had zero norm.
    pub skipped: Vec<usize>,
}

/// Mean cosine similarity over all token pairs i < j, one value per layer.
/// Token vectors with zero norm make a pair undefined; such pairs are
/// skipped and counted.
pub fn cosine_similarity_by_layer(hidden: &[Mat]) -> Result<CosineByLayer, SpectralError> {
    if hidden.is_empty() {
        return Err(SpectralError::TooSmall {
            detail: "need at least one layer".to_string(),
        });
    }
    let mut means = Vec::with_capacity(hidden.len());
    let mut skipped = Vec::with_capacity(hidden.len());
    for layer in hidden {
        let n = layer.rows();
        if n < 2 {
            return Err(SpectralError::TooSmall {
                detail: "need at least two tokens".to_string(),
            });
        }
        let norms: Vec<f64> = (0..n).map(|i| norm2(layer.row(i))).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut skip = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    skip += 1;
                    continue;
                }
                let dot: f64 = layer
                    .row(i)
                    .iter()
                    .zip(layer.row(j).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                total += dot / (norms[i] * norms[j]);
                count += 1;
            }
        }
        means.push(if count == 0 {
            0.0
        } else {
            total / count as f64
        });
        skipped.push(skip);
    }
    Ok(CosineByLayer { means, skipped })
}

/// Empirical transfer curve of a token-mixing matrix H: for every frequency
/// bin f in 0..=n/2, drive H with sinusoidal probes at that frequency and
/// measure |spectrum(Hx)_f| / |spectrum(x)_f|, averaged over probe phases.
pub fn layer_frequency_response(
    h: &Mat,
    probes_per_bin: usize,
    seed: u64,
) -> Result<Vec<f64>, SpectralError> {
    let n = h.rows();
    if n != h.cols() || n < 2 {
        return Err(SpectralError::TooSmall {
            detail: format!(
                "need a square mixing matrix with n >= 2, got {n}x{}",
                h.cols()
            ),
        });
    }
    let mut rng = Prng::new(seed);
    let bins = n / 2 + 1;
    let mut response = Vec::with_capacity(bins);
    for f in 0..bins {
        let mut acc = 0.0;
        let probes = probes_per_bin.max(1);
        for _ in 0..probes {
            // Phases stay in [0, pi/4] so no probe is ever close to the zero
            // vector (cos(phase) >= cos(pi/4) at DC and Nyquist).
            let phase = if f == 0 {
                0.0
            } else {
                rng.uniform(0.0, std::f64::consts::FRAC_PI_4)
            };
            let x: Vec<f64> = (0..n)
                .map(|k| (2.0 * std::f64::consts::PI * (f * k) as f64 / n as f64 + phase).cos())
                .collect();
            let y = h.matvec(&x);
            let in_mag = dft(&x)[f].norm();
            let out_mag = dft(&y)[f].norm();
            acc += out_mag / in_mag;
        }
        response.push(acc / probes as f64);
    }
    Ok(response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::BasisKind;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn dft_of_constant_is_dc_only() {
        let x = vec![3.5; 8];
        let spectrum = dft(&x);
        assert!(spectrum[0].norm() > 0.0);
        for bin in &spectrum[1..] {
            assert!(bin.norm() < 1e-12);
        }
    }

    #[test]
    fn idft_inverts_dft() {
        let mut rng = Prng::new(21);
        for n in [1usize, 7, 16] {
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let back = idft(&dft(&x));
            for (a, e) in back.iter().zip(x.iter()) {
                assert_close(*a, *e, 1e-10);
            }
        }
    }

    #[test]
    fn dft_preserves_energy() {
        let mut rng = Prng::new(22);
        for n in [4usize, 33, 128] {
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let spectrum = dft(&x);
            let direct = norm2(&x);
            let spectral: f64 = spectrum.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            assert_close(direct, spectral, 1e-10);
        }
    }

    #[test]
    fn frequency_order_pairs_conjugates() {
        assert_eq!(frequency_order(6), vec![0, 1, 5, 2, 4, 3]);
        assert_eq!(frequency_order(5), vec![0, 1, 4, 2, 3]);
        assert_eq!(frequency_order(1), vec![0]);
    }

    #[test]
    fn split_of_constant_is_pure_dc() {
        let x = vec![2.0; 10];
        let split = lfc_hfc_split(&x, 1).unwrap();
        for (l, orig) in split.lfc.iter().zip(x.iter()) {
            assert_close(*l, *orig, 1e-12);
        }
        for h in &split.hfc {
            assert_close(*h, 0.0, 1e-12);
        }
    }

    #[test]
    fn split_of_alternating_is_pure_nyquist() {
        let n = 12;
        let x: Vec<f64> = (0..n)
            .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let split = lfc_hfc_split(&x, 1).unwrap();
        for l in &split.lfc {
            assert_close(*l, 0.0, 1e-12);
        }
        for (h, orig) in split.hfc.iter().zip(x.iter()) {
            assert_close(*h, *orig, 1e-12);
        }
    }

    #[test]
    fn split_always_reconstructs() {
        let mut rng = Prng::new(23);
        for n in [3usize, 8, 31] {
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            for c in 1..=n {
                let split = lfc_hfc_split(&x, c).unwrap();
                for i in 0..n {
                    assert_close(split.lfc[i] + split.hfc[i], x[i], 1e-10);
                }
                if c == n {
                    for h in &split.hfc {
                        assert_close(*h, 0.0, 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn split_rejects_bad_cutoff() {
        let x = vec![1.0; 4];
        assert!(lfc_hfc_split(&x, 0).is_err());
        assert!(lfc_hfc_split(&x, 5).is_err());
    }

    #[test]
    fn uniform_averaging_kills_high_frequencies_immediately() {
        let n = 8;
        let m = Mat::from_vec(n, n, vec![1.0 / n as f64; n * n]);
        let mut rng = Prng::new(24);
        let x: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ratios = lowpass_trajectory(&m, &x, 3, 1).unwrap();
        for r in &ratios {
            assert!(*r < 1e-10, "uniform averaging leaves ratio {r}");
        }
    }

    #[test]
    fn softmax_matrices_smooth_towards_dc() {
        // Ten seeded trials; the ratio must collapse below 1e-3 by t = 64
        // and end below its first value.
        let n = 32;
        for seed in 0..10u64 {
            let mut rng = Prng::new(seed);
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
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let ratios = lowpass_trajectory(&m, &x, 64, 1).unwrap();
            assert!(ratios.iter().all(|r| r.is_finite() && *r >= 0.0));
            assert!(
                ratios[63] < 1e-3,
                "seed {seed}: ratio at t=64 is {}",
                ratios[63]
            );
            assert!(ratios[63] < ratios[0], "seed {seed}: no decay");
        }
    }

    #[test]
    fn zero_dc_denominator_reports_infinity() {
        // Uniform averaging of a zero-mean signal yields the zero vector;
        // the vanished LFC denominator must surface as +inf, not NaN.
        let n = 4;
        let m = Mat::from_vec(n, n, vec![0.25; 16]);
        let x = vec![1.0, -1.0, 1.0, -1.0];
        let ratios = lowpass_trajectory(&m, &x, 2, 1).unwrap();
        assert!(ratios.iter().all(|r| r.is_infinite() && *r > 0.0));
    }

    #[test]
    fn trajectory_rejects_non_stochastic_matrix() {
        let m = Mat::identity(4);
        let x = vec![1.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            lowpass_trajectory(&m, &x, 4, 1),
            Err(SpectralError::NotStochastic)
        ));
    }

    #[test]
    fn uniform_theta_is_low_pass_hand_value() {
        // theta = [1/3, 1/3, 1/3], lambda = [1, 0.5]:
        // ratio = (1 + 0.5 + 0.25)/3 = 0.58333...
        let theta = FilterCoefficients::new(vec![1.0 / 3.0; 3]);
        let basis = BasisSpec::monomial(2);
        let resp = filter_response(&theta, &basis, &[1.0, 0.5]).unwrap();
        assert_close(resp.ratios[0], 1.0, 1e-15);
        assert_close(resp.ratios[1], 1.75 / 3.0, 1e-12);
        assert!(resp.ratios[1] < 1.0);
    }

    #[test]
    fn alternating_theta_is_high_pass_with_closed_form() {
        // theta_k = (-0.9)^k truncated at K = 200 approximates 1/(1 + 0.9 x).
        let alpha: f64 = 0.9;
        let k = 200;
        let theta: Vec<f64> = (0..=k).map(|i| (-alpha).powi(i as i32)).collect();
        let theta = FilterCoefficients::new(theta);
        let basis = BasisSpec::monomial(k);
        let lambdas = [1.0, 0.5];
        let resp = filter_response(&theta, &basis, &lambdas).unwrap();
        for (i, &l) in resp.lambdas.iter().enumerate() {
            let closed = 1.0 / (1.0 + alpha * l);
            assert!(
                (resp.responses[i] - closed).abs() < 1e-6,
                "lambda {l}: {} vs closed form {closed}",
                resp.responses[i]
            );
        }
        let expected_ratio = (1.0 / 1.45) / (1.0 / 1.9);
        assert_close(resp.ratios[1], expected_ratio, 1e-4);
        assert!(resp.ratios[1] > 1.0);
    }

    #[test]
    fn pass_through_theta_has_flat_ratios() {
        let theta = FilterCoefficients::pass_through(4);
        let basis = BasisSpec::monomial(3);
        let resp = filter_response(&theta, &basis, &[1.0, 0.7, -0.3, 0.1]).unwrap();
        for r in &resp.ratios {
            assert_close(*r, 1.0, 1e-15);
        }
    }

    #[test]
    fn zero_filter_is_degenerate() {
        let theta = FilterCoefficients::new(vec![0.0; 3]);
        let basis = BasisSpec::monomial(2);
        assert!(matches!(
            filter_response(&theta, &basis, &[1.0, 0.5]),
            Err(SpectralError::DegenerateFilter)
        ));
    }

    #[test]
    fn filter_response_validates_spectrum() {
        let theta = FilterCoefficients::pass_through(3);
        let basis = BasisSpec::monomial(2);
        assert!(filter_response(&theta, &basis, &[0.9, 0.5]).is_err());
        assert!(filter_response(&theta, &basis, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn identical_tokens_have_unit_similarity() {
        let layer = Mat::from_vec(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let out = cosine_similarity_by_layer(&[layer]).unwrap();
        assert_close(out.means[0], 1.0, 1e-12);
        assert_eq!(out.skipped[0], 0);
    }

    #[test]
    fn orthogonal_tokens_have_zero_similarity() {
        let layer = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = cosine_similarity_by_layer(&[layer]).unwrap();
        assert_close(out.means[0], 0.0, 1e-12);
    }

    #[test]
    fn zero_norm_tokens_are_skipped_and_counted() {
        let layer = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let out = cosine_similarity_by_layer(&[layer]).unwrap();
        assert_eq!(out.skipped[0], 2);
        assert_close(out.means[0], 1.0, 1e-12);
    }

    #[test]
    fn cosine_matches_double_loop_oracle() {
        let mut rng = Prng::new(25);
        let (n, d) = (8, 4);
        let data: Vec<f64> = (0..n * d).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let layer = Mat::from_vec(n, d, data.clone());
        let out = cosine_similarity_by_layer(&[layer]).unwrap();

        // Naive pairwise oracle over nested vectors.
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let vi = &data[i * d..(i + 1) * d];
                let vj = &data[j * d..(j + 1) * d];
                let dot: f64 = vi.iter().zip(vj.iter()).map(|(a, b)| a * b).sum();
                let ni: f64 = vi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nj: f64 = vj.iter().map(|v| v * v).sum::<f64>().sqrt();
                total += dot / (ni * nj);
                count += 1;
            }
        }
        assert_close(out.means[0], total / count as f64, 1e-12);
    }

    #[test]
    fn identity_mixing_has_flat_response() {
        let h = Mat::identity(16);
        let resp = layer_frequency_response(&h, 3, 0).unwrap();
        for r in &resp {
            assert_close(*r, 1.0, 1e-10);
        }
    }

    #[test]
    fn uniform_averaging_keeps_only_dc() {
        let n = 16;
        let h = Mat::from_vec(n, n, vec![1.0 / n as f64; n * n]);
        let resp = layer_frequency_response(&h, 3, 0).unwrap();
        assert_close(resp[0], 1.0, 1e-10);
        for r in &resp[1..] {
            assert!(*r < 1e-10);
        }
    }

    #[test]
    fn basis_kind_is_exposed() {
        // Spot-check that the monomial spec wires through the scalar path.
        let spec = BasisSpec::monomial(2);
        assert_eq!(spec.kind, BasisKind::Monomial);
    }
}
