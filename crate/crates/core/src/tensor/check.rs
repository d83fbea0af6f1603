use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Magnitude below which gradient components are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central-difference gradient of a scalar function.
///
/// Each element is perturbed by `±eps`; `f` must be deterministic.
pub fn fd_grad<T, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    let two_eps = eps + eps;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / two_eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Worst element-wise [`relative_error`] and its index.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

/// Outcome of comparing backward gradients against finite differences for
/// one named parameter group.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub group: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn compare(group: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Self {
        let (max_rel_error, worst_index) = max_relative_error(analytic, numeric);
        Self {
            group: group.into(),
            elements: analytic.len(),
            max_rel_error,
            worst_index,
            analytic: analytic.get(worst_index).copied().unwrap_or(0.0),
            numeric: numeric.get(worst_index).copied().unwrap_or(0.0),
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}
