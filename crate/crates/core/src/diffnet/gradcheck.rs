//! Central finite-difference check of the reverse pass.
//!
//! The probe loss is `½‖f(x)‖²`, so the seed gradient at the output is the
//! output itself.

use super::mlp::{Grads, Mlp};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Real;

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub passed: bool,
    pub max_rel_error: f64,
}

/// Error between an analytic and a numeric partial, relative to
/// `max(|a|, |n|, 1)`; it degrades to absolute error below unit magnitude.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn probe_loss<T: Real>(net: &Mlp<T>, input: &Tensor<T>) -> Result<f64> {
    let out = net.forward(input)?;
    Ok(0.5 * out.values().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
}

/// Checks backprop gradients of the probe loss against finite differences.
pub fn grad_check<T: Real>(net: &Mlp<T>, input: &Tensor<T>, tolerance: f64) -> Result<GradCheck> {
    let fb = net.forward_backward(input, &net.forward(input)?)?;
    compare_gradients(net, input, &fb.grads, &fb.input_grad, tolerance)
}

/// Compares supplied gradients (e.g. deliberately corrupted ones) with
/// finite differences of the probe loss.
pub fn compare_gradients<T: Real>(
    net: &Mlp<T>,
    input: &Tensor<T>,
    param_grads: &Grads<T>,
    input_grad: &Tensor<T>,
    tolerance: f64,
) -> Result<GradCheck> {
    assert!(tolerance > 0.0, "tolerance must be positive");
    let h = T::lit(FD_STEP);
    let two_h = 2.0 * FD_STEP;
    let mut max_err = 0.0f64;

    let mut probe = net.clone();
    let analytic: Vec<Vec<T>> = param_grads.slices().iter().map(|s| s.to_vec()).collect();
    for (si, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe.param_slices()[si][j];
            probe.param_slices_mut()[si][j] = orig + h;
            let up = probe_loss(&probe, input)?;
            probe.param_slices_mut()[si][j] = orig - h;
            let down = probe_loss(&probe, input)?;
            probe.param_slices_mut()[si][j] = orig;
            max_err = max_err.max(relative_error(grad[j].as_f64(), (up - down) / two_h));
        }
    }

    let mut x = input.clone();
    for j in 0..x.len() {
        let orig = x.values()[j];
        x.values_mut()[j] = orig + h;
        let up = probe_loss(net, &x)?;
        x.values_mut()[j] = orig - h;
        let down = probe_loss(net, &x)?;
        x.values_mut()[j] = orig;
        max_err = max_err.max(relative_error(input_grad.values()[j].as_f64(), (up - down) / two_h));
    }

    Ok(GradCheck {
        passed: max_err <= tolerance,
        max_rel_error: max_err,
    })
}
