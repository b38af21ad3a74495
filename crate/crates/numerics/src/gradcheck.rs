//! Central-difference gradient oracle.
//!
//! Every analytic backward pass in the workspace is tested against this.

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

/// Central-difference estimate of ∇f at `x`. `eps` must lie in `[1e-6, 1e-4]`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(NumericsError::Oracle(format!(
            "eps {eps} outside [1e-6, 1e-4]"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::Oracle(format!(
                "non-finite objective when perturbing coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, defined as 0 when both are (numerically) zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm() + b.norm();
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}
