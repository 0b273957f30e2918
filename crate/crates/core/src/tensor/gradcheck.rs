//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

/// Default step for `f64` central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Estimates `∂f/∂p_i` for every coordinate with `(f(p+eps) - f(p-eps)) / (2 eps)`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let plus = f(&p);
            p[i] = orig - eps;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|g_a - g_fd| / max(1, |g_a|)`, maximized over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
