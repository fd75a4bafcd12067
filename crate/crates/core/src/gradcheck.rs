//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

/// Compares the analytic gradient returned by `f` at `x` against central
/// differences with step `h`.
///
/// Returns the largest per-coordinate error
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// # Panics
/// If `h` is not strictly positive.
pub fn fd_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(x);
    assert_eq!(analytic.shape(), x.shape(), "gradient shape must match input");
    let numeric = numerical_gradient(|t| f(t).0, x, h);
    analytic.data().iter().zip(numeric.data()).map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0)).fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function.
pub fn numerical_gradient<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}
