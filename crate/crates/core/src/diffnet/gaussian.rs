//! Diagonal-Gaussian helpers: reparameterized sampling and closed-form KL.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Log-variances are clamped to `[-LOG_VAR_LIMIT, LOG_VAR_LIMIT]` before
/// exponentiation.
pub const LOG_VAR_LIMIT: f64 = 10.0;

#[inline]
pub fn clamp_log_var<T: Real>(lv: T) -> T {
    let lim = T::lit(LOG_VAR_LIMIT);
    lv.max(-lim).min(lim)
}

/// `exp(0.5 * clamp(log_var))`.
#[inline]
pub fn std_from_log_var<T: Real>(lv: T) -> T {
    (T::lit(0.5) * clamp_log_var(lv)).exp()
}

/// `mean + exp(0.5 * log_var) * noise`, element-wise.
pub fn reparam_sample<T: Real>(mean: &Tensor<T>, log_var: &Tensor<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    mean.same_shape(log_var, "reparam log_var")?;
    mean.same_shape(noise, "reparam noise")?;
    let values = mean
        .values()
        .iter()
        .zip(log_var.values())
        .zip(noise.values())
        .map(|((&m, &lv), &e)| m + std_from_log_var(lv) * e)
        .collect();
    Tensor::new(mean.shape().to_vec(), values)
}

/// Pulls a gradient on the sample back to `(d_mean, d_log_var)`.
///
/// The clamp has zero derivative outside its range.
pub fn reparam_backward<T: Real>(
    log_var: &Tensor<T>,
    noise: &Tensor<T>,
    sample_grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    log_var.same_shape(noise, "reparam noise")?;
    log_var.same_shape(sample_grad, "reparam gradient")?;
    let lim = T::lit(LOG_VAR_LIMIT);
    let d_lv = log_var
        .values()
        .iter()
        .zip(noise.values())
        .zip(sample_grad.values())
        .map(|((&lv, &e), &g)| {
            if lv.abs() > lim {
                T::zero()
            } else {
                g * e * T::lit(0.5) * std_from_log_var(lv)
            }
        })
        .collect();
    Ok((
        sample_grad.clone(),
        Tensor::from_raw(log_var.shape().to_vec(), d_lv),
    ))
}

/// `KL(N(q_mean, diag q_std²) ‖ N(p_mean, diag p_std²))` in nats.
pub fn kl_diag_gaussians<T: Real>(q_mean: &[T], q_std: &[T], p_mean: &[T], p_std: &[T]) -> Result<T> {
    let n = q_mean.len();
    if q_std.len() != n || p_mean.len() != n || p_std.len() != n {
        return Err(Error::shape(format!(
            "KL operands of lengths {}, {}, {}, {}",
            n,
            q_std.len(),
            p_mean.len(),
            p_std.len()
        )));
    }
    if q_std.iter().chain(p_std).any(|&s| !(s > T::zero()) || !s.is_finite()) {
        return Err(Error::invalid("KL requires strictly positive finite standard deviations"));
    }
    let half = T::lit(0.5);
    let kl = (0..n)
        .map(|i| {
            let (qs, ps) = (q_std[i], p_std[i]);
            let d = q_mean[i] - p_mean[i];
            (ps / qs).ln() + (qs * qs + d * d) / (T::lit(2.0) * ps * ps) - half
        })
        .sum::<T>();
    // Rounding can leave a tiny negative residue for identical operands.
    Ok(kl.max(T::zero()))
}

/// `KL(N(mean, exp(log_var)) ‖ N(0, I))` together with its gradients with
/// respect to `mean` and `log_var` (clamp applied).
pub fn kl_standard_normal<T: Real>(mean: &[T], log_var: &[T]) -> (T, Vec<T>, Vec<T>) {
    let half = T::lit(0.5);
    let lim = T::lit(LOG_VAR_LIMIT);
    let mut kl = T::zero();
    let mut d_lv = Vec::with_capacity(log_var.len());
    for (&m, &lv) in mean.iter().zip(log_var) {
        let c = clamp_log_var(lv);
        let var = c.exp();
        kl = kl + half * (var + m * m - T::one() - c);
        d_lv.push(if lv.abs() > lim {
            T::zero()
        } else {
            half * (var - T::one())
        });
    }
    (kl, mean.to_vec(), d_lv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn reparam_examples() {
        let m = v(&[0.5, -2.0]);
        let out = reparam_sample(&m, &v(&[0.3, 1.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(out, m);
        let out = reparam_sample(&v(&[0.0]), &v(&[0.0]), &v(&[1.5])).unwrap();
        assert_eq!(out.values(), &[1.5]);
        let out = reparam_sample(&v(&[2.0]), &v(&[4.0f64.ln()]), &v(&[-1.0])).unwrap();
        assert!(out.values()[0].abs() < 1e-12);
        assert!(reparam_sample(&v(&[0.0]), &v(&[0.0, 0.0]), &v(&[0.0])).is_err());
    }

    #[test]
    fn reparam_backward_matches_finite_differences() {
        let lv = v(&[0.4, -1.2]);
        let e = v(&[0.7, -0.3]);
        let g = v(&[1.0, 2.0]);
        let (dm, dlv) = reparam_backward(&lv, &e, &g).unwrap();
        assert_eq!(dm, g);
        let h = 1e-6;
        for i in 0..2 {
            let f = |x: f64| (x * 0.5).exp() * e.values()[i] * g.values()[i];
            let fd = (f(lv.values()[i] + h) - f(lv.values()[i] - h)) / (2.0 * h);
            assert!((fd - dlv.values()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn log_var_is_clamped() {
        assert_eq!(std_from_log_var(1e6f64), (5.0f64).exp());
        assert_eq!(std_from_log_var(-1e6f64), (-5.0f64).exp());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gaussians::<f64>(&[0.3], &[0.7], &[0.3], &[0.7]).unwrap(), 0.0);
        let k = kl_diag_gaussians::<f64>(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap();
        assert!((k - 0.5).abs() < 1e-12);
        // ln(1/2) + 4/2 - 1/2
        let k = kl_diag_gaussians::<f64>(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap();
        assert!((k - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_bad_std() {
        assert!(kl_diag_gaussians(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
        assert!(kl_diag_gaussians(&[0.0], &[1.0], &[0.0], &[-1.0]).is_err());
        assert!(kl_diag_gaussians(&[0.0], &[1.0], &[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn standard_normal_kl_agrees_with_general_form() {
        let mean = [0.3, -1.1];
        let lv = [0.5, -0.8];
        let std: Vec<f64> = lv.iter().map(|&l| std_from_log_var(l)).collect();
        let (kl, dm, dlv) = kl_standard_normal(&mean, &lv);
        let general = kl_diag_gaussians(&mean, &std, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((kl - general).abs() < 1e-12);
        assert_eq!(dm, mean.to_vec());
        let h = 1e-6;
        for i in 0..2 {
            let mut up = lv;
            let mut dn = lv;
            up[i] += h;
            dn[i] -= h;
            let fd = (kl_standard_normal(&mean, &up).0 - kl_standard_normal(&mean, &dn).0) / (2.0 * h);
            assert!((fd - dlv[i]).abs() < 1e-7);
        }
    }
}
