//! Central finite-difference utilities for validating analytic gradients.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Central-difference gradient of a scalar function with respect to `x`.
pub fn central_diff<F>(mut f: F, x: &Tensor, step: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(&x.shape);
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let plus = f(&probe);
        probe.data[i] = orig - step;
        let minus = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error that degrades to absolute comparison near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape, numeric.shape);
    analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
