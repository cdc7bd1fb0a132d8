//! Central-difference verification of analytic gradients.
//!
//! The relative error uses max(|a|, |b|, 1e-8) as denominator so near-zero
//! gradients don't blow up the ratio.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between `analytic` and the central difference
/// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps over every coordinate of x.
/// f must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor, analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_sampled(f, x, analytic, eps, &coords)
}

/// Same check restricted to the given coordinates; used for model-sized
/// tensors where probing every entry is pointless.
pub fn grad_check_sampled<F>(
    mut f: F,
    x: &Tensor,
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidParameter(format!(
            "grad_check step must be in [1e-7, 1e-3], got {eps}"
        )));
    }
    if analytic.len() != x.numel() {
        return Err(Error::Contract(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x.numel()
        )));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe)?;
        probe.data[i] = orig - eps;
        let down = f(&probe)?;
        probe.data[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(fd, analytic[i]));
    }
    Ok(worst)
}
