//! Central-difference gradient verification.

/// Compare analytic gradients against central finite differences of `f`.
///
/// For each coordinate `i` of `theta`, the numeric estimate is
/// `(f(theta + h*e_i) - f(theta - h*e_i)) / (2h)`; the returned value is the
/// worst relative error `|analytic_i - fd_i| / (|analytic_i| + 1e-8)`.
/// `theta` is perturbed in place and restored before returning.
pub fn finite_diff_check<F>(mut f: F, theta: &mut [f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        theta.len(),
        analytic.len(),
        "finite_diff_check: {} parameters vs {} analytic gradients",
        theta.len(),
        analytic.len()
    );
    assert!(h > 0.0, "finite_diff_check: step must be positive");
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let up = f(theta);
        theta[i] = orig - h;
        let down = f(theta);
        theta[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
