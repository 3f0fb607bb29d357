use super::Tensor;

/// Central-difference estimate of `∂f/∂θ` at `param`, one element at a
/// time: `(f(θ + ε) − f(θ − ε)) / 2ε`.
pub fn finite_diff(mut loss_fn: impl FnMut(&Tensor) -> f64, param: &Tensor, eps: f64) -> Tensor {
    let mut probe = param.clone();
    let mut out = Tensor::zeros(param.shape());
    for i in 0..param.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = loss_fn(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = loss_fn(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// `|analytic − numeric| / (|numeric| + 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Largest [`relative_error`] over all elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
