use super::Tensor2D;

/// Compares an analytic gradient against central finite differences of `f`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_difference_check<F>(f: F, params: &Tensor2D, analytic_grad: &Tensor2D, eps: f64) -> f64
where
    F: Fn(&Tensor2D) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    assert_eq!(params.shape(), analytic_grad.shape(), "gradient shape");
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let x0 = params.as_slice()[i];
        probe.as_mut_slice()[i] = x0 + eps;
        let up = f(&probe);
        probe.as_mut_slice()[i] = x0 - eps;
        let down = f(&probe);
        probe.as_mut_slice()[i] = x0;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = analytic_grad.as_slice()[i];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
    }
    worst
}
