//! Polynomial bases for spectral filtering: the monomial family and the
//! Jacobi family B_k^{a,b}, evaluated either as plain scalars (analysis) or
//! through taped ops so gradients flow into the filtered values.
//!
//! The Jacobi recurrence is
//!
//! ```text
//! B_0 = 1
//! B_1 = (a - b)/2 + (a + b + 2) x / 2
//! B_k = (w_k x + w_k') B_{k-1} - w_k'' B_{k-2}        for k >= 2
//!
//! w_k   = (2k + a + b)(2k + a + b + 1) / (2k (k + a + b))
//! w_k'  = (2k + a + b - 1)(a^2 - b^2) / (2k (k + a + b)(2k + a + b - 2))
//! w_k'' = (k + a - 1)(k + b - 1)(2k + a + b) / (k (k + a + b)(2k + a + b - 2))
//! ```
//!
//! with a, b > -1. Note that at a = b = 0 this recurrence does NOT reduce to
//! the classical Legendre one (it yields B_2(x) = 2.5x^2 - 0.5 rather than
//! (3x^2 - 1)/2); we keep the recurrence exactly as written above, and the
//! coefficient-expansion oracle in the tests targets the same formulas.

use std::fmt;

use crate::tensor::{Tape, TensorId, TensorResult};

#[derive(Debug, Clone, PartialEq)]
pub enum PolyError {
    /// Jacobi parameters must satisfy a > -1 and b > -1.
    InvalidJacobiParams { a: f64, b: f64 },
    /// Coefficient count does not match the basis order.
    CoefficientMismatch { expected: usize, got: usize },
    /// A filtered value fell outside the sigmoid range [0, 1].
    ValueOutOfRange { value: f64 },
}

impl fmt::Display for PolyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolyError::InvalidJacobiParams { a, b } => {
                write!(f, "jacobi parameters must exceed -1, got a={a}, b={b}")
            }
            PolyError::CoefficientMismatch { expected, got } => {
                write!(f, "expected {expected} filter coefficients, got {got}")
            }
            PolyError::ValueOutOfRange { value } => {
                write!(f, "singular value {value} outside [0, 1]")
            }
        }
    }
}

impl std::error::Error for PolyError {}

/// Which polynomial family a filter is expanded in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasisKind {
    Monomial,
    Jacobi { a: f64, b: f64 },
}

/// A polynomial basis together with its maximum order K.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub max_order: usize,
}

impl BasisSpec {
    pub fn monomial(max_order: usize) -> Self {
        BasisSpec {
            kind: BasisKind::Monomial,
            max_order,
        }
    }

    pub fn jacobi(max_order: usize, a: f64, b: f64) -> Result<Self, PolyError> {
        if !(a > -1.0 && b > -1.0) || !a.is_finite() || !b.is_finite() {
            return Err(PolyError::InvalidJacobiParams { a, b });
        }
        Ok(BasisSpec {
            kind: BasisKind::Jacobi { a, b },
            max_order,
        })
    }

    /// Number of coefficients a paired filter must carry (K + 1).
    pub fn coeff_len(&self) -> usize {
        self.max_order + 1
    }
}

/// Learnable filter coefficients theta_0..theta_K.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoefficients {
    theta: Vec<f64>,
}

impl FilterCoefficients {
    pub fn new(theta: Vec<f64>) -> Self {
        assert!(!theta.is_empty(), "filter needs at least theta_0");
        FilterCoefficients { theta }
    }

    /// The identity-start coefficients [1, 0, ..., 0]: a pure T_0 pass-through.
    pub fn pass_through(len: usize) -> Self {
        let mut theta = vec![0.0; len];
        theta[0] = 1.0;
        FilterCoefficients { theta }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

struct JacobiWeights {
    w: f64,
    w_prime: f64,
    w_dprime: f64,
}

fn jacobi_weights(k: usize, a: f64, b: f64) -> JacobiWeights {
    let kf = k as f64;
    let s = a + b;
    let w = (2.0 * kf + s) * (2.0 * kf + s + 1.0) / (2.0 * kf * (kf + s));
    let w_prime =
        (2.0 * kf + s - 1.0) * (a * a - b * b) / (2.0 * kf * (kf + s) * (2.0 * kf + s - 2.0));
    let w_dprime =
        (kf + a - 1.0) * (kf + b - 1.0) * (2.0 * kf + s) / (kf * (kf + s) * (2.0 * kf + s - 2.0));
    JacobiWeights {
        w,
        w_prime,
        w_dprime,
    }
}

/// Evaluate B_k^{a,b}(x) by the three-term recurrence.
pub fn jacobi_eval(k: usize, a: f64, b: f64, x: f64) -> Result<f64, PolyError> {
    if !(a > -1.0 && b > -1.0) || !a.is_finite() || !b.is_finite() {
        return Err(PolyError::InvalidJacobiParams { a, b });
    }
    if k == 0 {
        return Ok(1.0);
    }
    let b1 = (a - b) / 2.0 + (a + b + 2.0) * x / 2.0;
    if k == 1 {
        return Ok(b1);
    }
    let mut prev2 = 1.0;
    let mut prev1 = b1;
    for order in 2..=k {
        let jw = jacobi_weights(order, a, b);
        let cur = (jw.w * x + jw.w_prime) * prev1 - jw.w_dprime * prev2;
        prev2 = prev1;
        prev1 = cur;
    }
    Ok(prev1)
}

/// Evaluate the order-k basis function T_k(x) for either family.
pub fn basis_eval(spec: &BasisSpec, k: usize, x: f64) -> Result<f64, PolyError> {
    match spec.kind {
        BasisKind::Monomial => Ok(x.powi(k as i32)),
        BasisKind::Jacobi { a, b } => jacobi_eval(k, a, b, x),
    }
}

/// g_theta(x) = sum_k theta_k T_k(x), evaluated with a running recurrence.
pub fn apply_filter_scalar(
    theta: &FilterCoefficients,
    spec: &BasisSpec,
    x: f64,
) -> Result<f64, PolyError> {
    if theta.len() != spec.coeff_len() {
        return Err(PolyError::CoefficientMismatch {
            expected: spec.coeff_len(),
            got: theta.len(),
        });
    }
    let coeffs = theta.theta();
    match spec.kind {
        BasisKind::Monomial => {
            let mut acc = 0.0;
            let mut power = 1.0;
            for (k, &c) in coeffs.iter().enumerate() {
                if k > 0 {
                    power *= x;
                }
                acc += c * power;
            }
            Ok(acc)
        }
        BasisKind::Jacobi { a, b } => {
            if !(a > -1.0 && b > -1.0) {
                return Err(PolyError::InvalidJacobiParams { a, b });
            }
            let mut acc = coeffs[0];
            if coeffs.len() == 1 {
                return Ok(acc);
            }
            let mut prev2 = 1.0;
            let mut prev1 = (a - b) / 2.0 + (a + b + 2.0) * x / 2.0;
            acc += coeffs[1] * prev1;
            for (k, &c) in coeffs.iter().enumerate().skip(2) {
                let jw = jacobi_weights(k, a, b);
                let cur = (jw.w * x + jw.w_prime) * prev1 - jw.w_dprime * prev2;
                prev2 = prev1;
                prev1 = cur;
                acc += c * cur;
            }
            Ok(acc)
        }
    }
}

/// Build the (K+1) x m matrix whose row k holds T_k applied elementwise to
/// the flattened values of `s`, through taped ops so gradients flow back
/// into `s`. Every entry of `s` must lie in [0, 1] (the sigmoid range the
/// singular values are produced in).
pub fn basis_stack(tape: &mut Tape, spec: &BasisSpec, s: TensorId) -> TensorResult<TensorId> {
    if let BasisKind::Jacobi { a, b } = spec.kind {
        if !(a > -1.0 && b > -1.0) {
            return Err(crate::tensor::TensorError::Domain {
                op: "basis_stack",
                detail: format!("jacobi parameters must exceed -1, got a={a}, b={b}"),
            });
        }
    }
    if let Some(&bad) = tape.value(s).iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(crate::tensor::TensorError::Domain {
            op: "basis_stack",
            detail: format!("singular value {bad} outside [0, 1]"),
        });
    }
    let m: usize = tape.shape(s).iter().product();
    let flat = tape.reshape(s, vec![1, m])?;
    let ones = tape.ones(vec![1, m])?;

    let mut rows: Vec<TensorId> = Vec::with_capacity(spec.coeff_len());
    rows.push(ones);
    if spec.max_order >= 1 {
        match spec.kind {
            BasisKind::Monomial => {
                rows.push(flat);
                for _ in 2..=spec.max_order {
                    let prev = *rows.last().unwrap();
                    rows.push(tape.mul(prev, flat)?);
                }
            }
            BasisKind::Jacobi { a, b } => {
                let b1 = tape.affine(flat, (a + b + 2.0) / 2.0, (a - b) / 2.0)?;
                rows.push(b1);
                for k in 2..=spec.max_order {
                    let jw = jacobi_weights(k, a, b);
                    let lin = tape.affine(flat, jw.w, jw.w_prime)?;
                    let term1 = tape.mul(lin, rows[k - 1])?;
                    let term2 = tape.scale(rows[k - 2], jw.w_dprime)?;
                    rows.push(tape.sub(term1, term2)?);
                }
            }
        }
    }
    tape.concat_rows(&rows)
}

/// f = theta . stack: combine a 1 x (K+1) coefficient tensor with a
/// (K+1) x m basis stack into the filtered values, differentiable in both.
/// The result is reshaped back to `like`'s shape.
pub fn apply_filter(
    tape: &mut Tape,
    theta: TensorId,
    stack: TensorId,
    like: TensorId,
) -> TensorResult<TensorId> {
    let theta_shape = tape.shape(theta).to_vec();
    let stack_rows = tape.shape(stack)[0];
    if theta_shape != [1, stack_rows] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "apply_filter",
            detail: format!(
                "coefficients {theta_shape:?} do not pair with a {stack_rows}-row stack"
            ),
        });
    }
    let combined = tape.matmul(theta, stack)?;
    let out_shape = tape.shape(like).to_vec();
    tape.reshape(combined, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    #[test]
    fn jacobi_order_zero_is_one() {
        for &(a, b) in &[(0.0, 0.0), (1.0, 1.0), (1.5, -0.5), (2.0, 0.3)] {
            assert_eq!(jacobi_eval(0, a, b, 0.3).unwrap(), 1.0);
        }
    }

    #[test]
    fn jacobi_order_one_legendre_like_params() {
        // (a - b)/2 + (a + b + 2) x / 2 at a = b = 0 collapses to x.
        let v = jacobi_eval(1, 0.0, 0.0, 0.7).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
    }

    #[test]
    fn jacobi_order_two_hand_computed() {
        // w_2 = 2.5, w_2' = 0, w_2'' = 0.5 at a = b = 0:
        // B_2(0.5) = (2.5 * 0.5) * 0.5 - 0.5 = 0.125.
        let v = jacobi_eval(2, 0.0, 0.0, 0.5).unwrap();
        assert!((v - 0.125).abs() < 1e-15, "got {v}");
    }

    #[test]
    fn jacobi_rejects_invalid_params() {
        assert!(matches!(
            jacobi_eval(2, -1.0, 0.0, 0.5),
            Err(PolyError::InvalidJacobiParams { .. })
        ));
        assert!(matches!(
            BasisSpec::jacobi(3, 0.0, -1.5),
            Err(PolyError::InvalidJacobiParams { .. })
        ));
    }

    #[test]
    fn monomial_stack_powers_of_half() {
        let mut tape = Tape::new();
        let s = tape.input(vec![1, 1], vec![0.5]).unwrap();
        let spec = BasisSpec::monomial(2);
        let stack = basis_stack(&mut tape, &spec, s).unwrap();
        assert_eq!(tape.shape(stack), &[3, 1]);
        assert_eq!(tape.value(stack), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn jacobi_stack_first_two_rows() {
        let mut tape = Tape::new();
        let s = tape.input(vec![1, 1], vec![0.7]).unwrap();
        let spec = BasisSpec::jacobi(1, 0.0, 0.0).unwrap();
        let stack = basis_stack(&mut tape, &spec, s).unwrap();
        let v = tape.value(stack);
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!((v[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn stack_row_zero_is_all_ones() {
        let mut rng = Prng::new(9);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|_| rng.next_f64()).collect();
        let s = tape.input(vec![3, 4], data).unwrap();
        for spec in [
            BasisSpec::monomial(4),
            BasisSpec::jacobi(4, 1.0, 1.0).unwrap(),
            BasisSpec::jacobi(3, 1.5, -0.5).unwrap(),
        ] {
            let stack = basis_stack(&mut tape, &spec, s).unwrap();
            for &v in &tape.value(stack)[0..12] {
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn stack_rejects_out_of_range_values() {
        let mut tape = Tape::new();
        let s = tape.input(vec![1, 2], vec![0.5, 1.2]).unwrap();
        let spec = BasisSpec::monomial(2);
        assert!(basis_stack(&mut tape, &spec, s).is_err());
    }

    #[test]
    fn pass_through_filter_yields_ones() {
        let mut tape = Tape::new();
        let s = tape.input(vec![2, 2], vec![0.1, 0.4, 0.7, 0.9]).unwrap();
        let spec = BasisSpec::monomial(2);
        let stack = basis_stack(&mut tape, &spec, s).unwrap();
        let theta = tape.input(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let f = apply_filter(&mut tape, theta, stack, s).unwrap();
        assert_eq!(tape.shape(f), &[2, 2]);
        assert_eq!(tape.value(f), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn identity_polynomial_reproduces_input() {
        let mut tape = Tape::new();
        let s = tape.input(vec![1, 2], vec![0.3, 0.9]).unwrap();
        let spec = BasisSpec::monomial(1);
        let stack = basis_stack(&mut tape, &spec, s).unwrap();
        let theta = tape.input(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let f = apply_filter(&mut tape, theta, stack, s).unwrap();
        assert_eq!(tape.value(f), &[0.3, 0.9]);
    }

    #[test]
    fn taped_monomial_filter_matches_horner_oracle() {
        // Horner-scheme oracle, written independently of the tape path.
        let horner = |coeffs: &[f64], x: f64| -> f64 {
            coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
        };
        let mut rng = Prng::new(77);
        for _ in 0..20 {
            let k = 1 + rng.below(6);
            let theta_v: Vec<f64> = (0..=k).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let xs: Vec<f64> = (0..5).map(|_| rng.next_f64()).collect();

            let mut tape = Tape::new();
            let s = tape.input(vec![1, xs.len()], xs.clone()).unwrap();
            let spec = BasisSpec::monomial(k);
            let stack = basis_stack(&mut tape, &spec, s).unwrap();
            let theta = tape.input(vec![1, k + 1], theta_v.clone()).unwrap();
            let f = apply_filter(&mut tape, theta, stack, s).unwrap();
            for (j, &x) in xs.iter().enumerate() {
                let expected = horner(&theta_v, x);
                assert!(
                    (tape.value(f)[j] - expected).abs() < 1e-12,
                    "x={x}: taped {} vs horner {expected}",
                    tape.value(f)[j]
                );
            }
        }
    }

    #[test]
    fn scalar_filter_agrees_with_taped_path() {
        let mut rng = Prng::new(123);
        let spec = BasisSpec::jacobi(5, 1.5, -0.5).unwrap();
        let theta_v: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let theta = FilterCoefficients::new(theta_v.clone());
        for _ in 0..25 {
            let x = rng.next_f64();
            let scalar = apply_filter_scalar(&theta, &spec, x).unwrap();
            let mut tape = Tape::new();
            let s = tape.input(vec![1, 1], vec![x]).unwrap();
            let stack = basis_stack(&mut tape, &spec, s).unwrap();
            let tid = tape.input(vec![1, 6], theta_v.clone()).unwrap();
            let f = apply_filter(&mut tape, tid, stack, s).unwrap();
            assert!((tape.value(f)[0] - scalar).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_gradient_matches_finite_differences() {
        let mut rng = Prng::new(55);
        let spec = BasisSpec::jacobi(3, 0.0, 0.0).unwrap();
        let theta0: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let s0: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
        let weights: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let loss_of = |tv: &[f64], sv: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let s = tape.input(vec![1, 6], sv.to_vec()).unwrap();
            let stack = basis_stack(&mut tape, &spec, s).unwrap();
            let theta = tape.input(vec![1, 4], tv.to_vec()).unwrap();
            let f = apply_filter(&mut tape, theta, stack, s).unwrap();
            let w = tape.constant(vec![1, 6], weights.clone()).unwrap();
            let prod = tape.mul(f, w).unwrap();
            let loss = tape.sum_all(prod).unwrap();
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let s = tape.param(vec![1, 6], s0.clone()).unwrap();
        let stack = basis_stack(&mut tape, &spec, s).unwrap();
        let theta = tape.param(vec![1, 4], theta0.clone()).unwrap();
        let f = apply_filter(&mut tape, theta, stack, s).unwrap();
        let w = tape.constant(vec![1, 6], weights.clone()).unwrap();
        let prod = tape.mul(f, w).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();

        let h = 1e-5;
        let gt = tape.grad(theta).unwrap().to_vec();
        for i in 0..theta0.len() {
            let mut tp = theta0.clone();
            let mut tm = theta0.clone();
            tp[i] += h;
            tm[i] -= h;
            let num = (loss_of(&tp, &s0) - loss_of(&tm, &s0)) / (2.0 * h);
            let denom = gt[i].abs().max(num.abs()).max(1e-8);
            assert!((gt[i] - num).abs() / denom < 1e-4);
        }
        let gs = tape.grad(s).unwrap().to_vec();
        for i in 0..s0.len() {
            let mut sp = s0.clone();
            let mut sm = s0.clone();
            sp[i] = (sp[i] + h).min(1.0);
            sm[i] = (sm[i] - h).max(0.0);
            let num = (loss_of(&theta0, &sp) - loss_of(&theta0, &sm)) / (sp[i] - sm[i]);
            let denom = gs[i].abs().max(num.abs()).max(1e-8);
            assert!((gs[i] - num).abs() / denom < 1e-4);
        }
    }
}
