use rand::Rng;
use serde::{Deserialize, Serialize};

use super::qnet::MultiHeadQNet;
use crate::error::{Error, Result};
use crate::perceived::{ActionIndex, PolicyState};
use crate::scalar::Real;

/// Linear decay from `start` to `end` over `decay_steps`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, decay_steps: u64) -> Result<Self> {
        let unit = 0.0..=1.0;
        if !unit.contains(&start) || !unit.contains(&end) || end > start || decay_steps == 0 {
            return Err(Error::Config(format!(
                "epsilon schedule {start} -> {end} over {decay_steps} steps is invalid"
            )));
        }
        Ok(Self {
            start,
            end,
            decay_steps,
        })
    }

    pub fn value(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        (self.start + (self.end - self.start) * frac).max(self.end)
    }
}

/// Highest-valued legal action; NOP (the last entry) is always legal and
/// ties go to the lowest index.
pub fn masked_argmax<T: Real>(q: &[T], mask: &[bool]) -> ActionIndex {
    debug_assert_eq!(q.len(), mask.len() + 1);
    let nop = mask.len();
    let mut best = None::<(usize, T)>;
    for (a, &v) in q.iter().enumerate() {
        if a < nop && !mask[a] {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((a, v));
        }
    }
    ActionIndex(best.map_or(nop, |(a, _)| a))
}

/// Epsilon-greedy choice restricted to legal actions.
pub fn select_action<T: Real, R: Rng + ?Sized>(
    net: &MultiHeadQNet<T>,
    state: &PolicyState<T>,
    head: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<ActionIndex> {
    if head >= net.head_count() {
        return Err(Error::invalid(format!(
            "head {head} out of range ({} heads)",
            net.head_count()
        )));
    }
    let legal = state.legal_actions();
    if legal.len() == 1 {
        return Ok(legal[0]);
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(legal[rng.random_range(0..legal.len())]);
    }
    let q = net.q_values(state, head)?;
    Ok(masked_argmax(&q, &state.mask))
}

/// Uniform over the legal actions (valid slots and NOP).
pub fn random_action<T: Real, R: Rng + ?Sized>(state: &PolicyState<T>, rng: &mut R) -> ActionIndex {
    let legal = state.legal_actions();
    legal[rng.random_range(0..legal.len())]
}

/// Nearest candidate when there is one, NOP otherwise.
pub fn greedy_nearest_action<T: Real>(state: &PolicyState<T>) -> ActionIndex {
    if state.mask.first().copied().unwrap_or(false) {
        ActionIndex(0)
    } else {
        ActionIndex::nop(state.slots())
    }
}
