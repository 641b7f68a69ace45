//! Softmax map between unconstrained score vectors and simplex weights,
//! plus the log-sum-exp primitives used throughout the crate.
//!
//! The convention everywhere is that model K is the reference: a length-(K−1)
//! score vector `alpha` is extended with an implicit trailing zero before the
//! softmax, so `w_k = exp(alpha_k) / (1 + Σ exp(alpha))` for k < K and
//! `w_K = 1 / (1 + Σ exp(alpha))`. Pinning the last entry makes the map a
//! bijection from R^{K−1} onto the open simplex interior; it also means the
//! output is NOT invariant to adding a constant to the K−1 free entries.

/// Numerically stable log(Σ exp(x_i)). Returns −∞ for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Stable log(exp(a) + exp(b)).
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Softmax with the last-index reference convention: maps a length-(K−1)
/// score vector to a length-K simplex vector by appending an implicit zero.
///
/// Overflow is guarded by max-subtraction, so entries like `alpha = [1000]`
/// yield `(1 − u, u)` with `u` subnormal-small rather than NaN.
pub fn softmax_weights(alpha_row: &[f64]) -> Vec<f64> {
    let k = alpha_row.len() + 1;
    let mut w = Vec::with_capacity(k);
    let m = alpha_row.iter().cloned().fold(0.0f64, f64::max); // implicit 0 participates
    let mut denom = 0.0;
    for &a in alpha_row {
        let e = (a - m).exp();
        w.push(e);
        denom += e;
    }
    let e_ref = (-m).exp();
    w.push(e_ref);
    denom += e_ref;
    for v in &mut w {
        *v /= denom;
    }
    w
}

/// Softmax over a full length-K score vector (no implicit reference entry).
pub fn softmax_full(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let denom: f64 = w.iter().sum();
    for v in &mut w {
        *v /= denom;
    }
    w
}

/// log Σ_k w_k exp(lpd_k) for one observation, in nats. Weights may contain
/// exact zeros; those terms are skipped so that 0·exp(−∞) never produces NaN.
pub fn log_mix(weights: &[f64], lpd_row: &[f64]) -> f64 {
    debug_assert_eq!(weights.len(), lpd_row.len());
    let mut m = f64::NEG_INFINITY;
    for (w, l) in weights.iter().zip(lpd_row) {
        if *w > 0.0 {
            let t = w.ln() + l;
            if t > m {
                m = t;
            }
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for (w, l) in weights.iter().zip(lpd_row) {
        if *w > 0.0 {
            s += (w.ln() + l - m).exp();
        }
    }
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_identity_case() {
        let w = softmax_weights(&[0.0]);
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn softmax_analytic_three_models() {
        let w = softmax_weights(&[2.0f64.ln(), 0.0]);
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w[2], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn softmax_overflow_guard() {
        let w = softmax_weights(&[1000.0]);
        assert!(w.iter().all(|v| v.is_finite()));
        assert!(w[1] < 1e-300);
        assert_abs_diff_eq!(w[0] + w[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_over_wide_range() {
        for a in [-700.0, -30.0, -1.0, 0.0, 1.0, 30.0, 700.0] {
            for b in [-700.0, 0.0, 700.0] {
                let w = softmax_weights(&[a, b]);
                let s: f64 = w.iter().sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn softmax_not_translation_invariant() {
        // The reference entry is pinned at 0, so shifting the K−1 free scores
        // must move the output; only a full-K softmax is shift-invariant.
        let w0 = softmax_weights(&[0.3, -0.2]);
        let w1 = softmax_weights(&[0.3 + 1.0, -0.2 + 1.0]);
        assert!((w0[0] - w1[0]).abs() > 1e-3);
        let f0 = softmax_full(&[0.3, -0.2, 0.0]);
        let f1 = softmax_full(&[1.3, 0.8, 1.0]);
        for (a, b) in f0.iter().zip(&f1) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // And the pinned-reference map agrees with the full softmax on the
        // extended vector, which is the form every caller must use.
        for (a, b) in w0.iter().zip(&f0) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = [-1.0f64, 0.5, 2.0];
        let direct = xs.iter().map(|x| f64::exp(*x)).sum::<f64>().ln();
        assert_abs_diff_eq!(log_sum_exp(&xs), direct, epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        // No intermediate overflow even when exp would saturate.
        assert!(log_sum_exp(&[-1e308, -1e308]).is_finite());
        assert_abs_diff_eq!(log_sum_exp(&[800.0, 800.0]), 800.0 + 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn log_mix_skips_zero_weights() {
        let v = log_mix(&[1.0, 0.0], &[-1.0, f64::NEG_INFINITY]);
        assert_abs_diff_eq!(v, -1.0, epsilon = 1e-15);
    }
}
