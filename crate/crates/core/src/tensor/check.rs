use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate.
pub fn finite_diff_grad<T: Float>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let two_eps = eps + eps;
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / two_eps;
    }
    Ok(out)
}

/// `max_i |analytic_i - numeric_i| / max(|numeric_i|, floor)`.
pub fn max_relative_error<T: Float>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a.as_f64() - n.as_f64()).abs() / n.as_f64().abs().max(floor))
        .fold(0.0, f64::max)
}
