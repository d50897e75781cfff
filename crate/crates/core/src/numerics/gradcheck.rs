//! Finite-difference gradient oracle used to validate backward passes.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::Result;

/// Default step size for central differences (64-bit evaluation assumed).
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative-error tolerance used by the gradient-check suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Central-difference gradient of a scalar-valued function at `theta`.
///
/// Evaluates `f` twice per coordinate with a symmetric perturbation of `h`.
/// Meant to run in f64; in f32 the truncation error of the quotient swamps
/// the quantity being checked.
pub fn finite_difference_gradient<S, F>(mut f: F, theta: &Tensor<S>, h: f64) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<S>,
{
    let step = S::from_f64(h);
    let two = S::from_f64(2.0);
    let mut point = theta.clone();
    let mut grad = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let original = point.data()[i];
        point.data_mut()[i] = original + step;
        let plus = f(&point)?;
        point.data_mut()[i] = original - step;
        let minus = f(&point)?;
        point.data_mut()[i] = original;
        grad.push((plus - minus) / (two * step));
    }
    Tensor::new(theta.shape().to_vec(), grad)
}

/// Relative error with an absolute floor: `|a - b| / max(max(|a|,|b|), 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between an analytic gradient and its
/// finite-difference estimate.
pub fn max_relative_error<S: Scalar>(analytic: &Tensor<S>, numeric: &Tensor<S>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a.to_f64(), n.to_f64()))
        .fold(0.0, f64::max)
}
