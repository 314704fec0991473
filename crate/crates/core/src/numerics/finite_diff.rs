use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
///
/// `eps` must lie in `[1e-7, 1e-3]`, the range where double-precision
/// central differences are meaningful.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "f returned {plus} / {minus} at element {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a - b| / max(|a|, |b|)`, with an absolute floor below which two values
/// count as equal (both are then dominated by finite-difference roundoff).
pub fn relative_error(a: f64, b: f64, abs_floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}

pub fn max_relative_error(a: &[f64], b: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y, abs_floor))
        .fold(0.0, f64::max)
}
