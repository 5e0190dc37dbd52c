//! Central-difference gradient checking used by the test suites and kept
//! public so integration tests and benches can reuse it.

/// Central finite differences of a scalar function at `x` with step `h`:
/// g_i = (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Worst-case relative error between two gradient vectors. The denominator
/// is floored at 1e-4 so near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
