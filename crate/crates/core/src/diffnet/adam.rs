use serde::{Deserialize, Serialize};

use super::mlp::{Grads, Mlp};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam config {self:?}")))
        }
    }
}

/// Moment accumulators for a fixed list of parameter slices.
///
/// One state can span several networks: slot `i` always refers to the `i`-th
/// slice handed to [`AdamState::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, slot_sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: slot_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: slot_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_mlp(config: AdamConfig, net: &Mlp<T>) -> Self {
        let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        Self::new(config, &sizes)
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    /// One bias-corrected Adam update.
    ///
    /// Slots whose gradient is `None` are left alone: neither their
    /// parameters nor their moments change. Nothing is mutated if any
    /// gradient is non-finite.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[Option<&[T]>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} slots, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() {
                return Err(Error::shape(format!(
                    "slot {i}: optimizer size {} vs parameter size {}",
                    self.first[i].len(),
                    p.len()
                )));
            }
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::shape(format!(
                        "slot {i}: gradient size {} vs parameter size {}",
                        g.len(),
                        p.len()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence(format!("non-finite gradient in slot {i}")));
                }
            }
        }

        self.step += 1;
        let c = &self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let lr = T::lit(c.lr);
        let eps = T::lit(c.epsilon);
        let t = self.step as i32;
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Adam step on a single network.
pub fn adam_step<T: Real>(net: &mut Mlp<T>, grads: &Grads<T>, state: &mut AdamState<T>) -> Result<()> {
    let g: Vec<Option<&[T]>> = grads.slices().into_iter().map(Some).collect();
    let mut p = net.param_slices_mut();
    state.update(&mut p, &g)
}
