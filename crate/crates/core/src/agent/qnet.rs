//! Shared-trunk Q-network with one output head per sensing modality.

use serde::{Deserialize, Serialize};

use super::replay::Transition;
use crate::diffnet::{build_mlp, Activation, AdamConfig, AdamState, Grads, Mlp, MlpSpec, Tensor};
use crate::error::{Error, Result};
use crate::perceived::PolicyState;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Policy-state length; must equal `I·d_z + I` (or `I·2·d_z + I` with stds).
    pub input_dim: usize,
    /// One head per modality.
    pub heads: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub gamma: f64,
    pub lr: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Target network refresh period, in train steps.
    pub target_sync_every: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Agent requests over which epsilon decays.
    pub eps_decay_steps: u64,
    /// Agent requests between train steps.
    pub train_every: u64,
    /// Agent requests collected before the first train step.
    pub learning_starts: u64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            input_dim: 6,
            heads: 2,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            gamma: 0.95,
            lr: 1e-3,
            replay_capacity: 10_000,
            batch_size: 64,
            target_sync_every: 500,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 10_000,
            train_every: 1,
            learning_starts: 500,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 {
            return fail("agent.input_dim must be positive".into());
        }
        if self.heads == 0 {
            return fail("agent.heads must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return fail(format!(
                "agent.hidden {:?} needs at least one positive width",
                self.hidden
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("agent.gamma {} outside [0, 1)", self.gamma));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("agent.lr {} must be >= 0", self.lr));
        }
        if self.replay_capacity == 0 || self.batch_size == 0 {
            return fail("agent.replay_capacity and agent.batch_size must be positive".into());
        }
        if self.target_sync_every == 0 || self.train_every == 0 {
            return fail("agent.target_sync_every and agent.train_every must be positive".into());
        }
        super::EpsilonSchedule::new(self.eps_start, self.eps_end, self.eps_decay_steps)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct MultiHeadQNet<T: Real> {
    trunk: Mlp<T>,
    heads: Vec<Mlp<T>>,
}

impl<T: Real> MultiHeadQNet<T> {
    /// Tanh trunk `input_dim → hidden…`, then one linear head per modality
    /// producing `actions` values.
    pub fn new(config: &AgentConfig, actions: usize) -> Result<Self> {
        config.validate()?;
        if actions < 2 {
            return Err(Error::Config(format!(
                "a Q-head needs at least one slot plus NOP, got {actions} outputs"
            )));
        }
        let mut sizes = vec![config.input_dim];
        sizes.extend(&config.hidden);
        let acts = vec![config.activation; sizes.len() - 1];
        let trunk = build_mlp(&MlpSpec::with_activations(sizes, acts, config.seed.wrapping_mul(7919)))?;
        let width = *config.hidden.last().expect("validated");
        let heads = (0..config.heads)
            .map(|h| {
                let seed = config.seed.wrapping_mul(7919).wrapping_add(1 + h as u64);
                build_mlp(&MlpSpec::new(vec![width, actions], Activation::Identity, seed))
            })
            .collect::<Result<_>>()?;
        Ok(Self { trunk, heads })
    }

    pub fn from_parts(trunk: Mlp<T>, heads: Vec<Mlp<T>>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Checkpoint("Q-network without heads".into()));
        }
        let width = trunk.output_size();
        let actions = heads[0].output_size();
        if heads
            .iter()
            .any(|h| h.input_size() != width || h.output_size() != actions)
        {
            return Err(Error::Checkpoint(format!(
                "heads must map trunk width {width} to {actions} actions"
            )));
        }
        Ok(Self { trunk, heads })
    }

    pub fn trunk(&self) -> &Mlp<T> {
        &self.trunk
    }

    pub fn heads(&self) -> &[Mlp<T>] {
        &self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_size()
    }

    /// `I + 1`.
    pub fn action_count(&self) -> usize {
        self.heads[0].output_size()
    }

    pub fn zero_params(&mut self) {
        self.trunk.zero_params();
        self.heads.iter_mut().for_each(Mlp::zero_params);
    }

    fn param_slices(&self) -> Vec<&[T]> {
        std::iter::once(&self.trunk)
            .chain(&self.heads)
            .flat_map(|n| n.param_slices())
            .collect()
    }

    /// Adam state spanning trunk and every head.
    pub fn optimizer(&self, config: AdamConfig) -> AdamState<T> {
        let sizes: Vec<usize> = self.param_slices().iter().map(|s| s.len()).collect();
        AdamState::new(config, &sizes)
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.heads.len() {
            return Err(Error::invalid(format!(
                "head {head} out of range ({} heads)",
                self.heads.len()
            )));
        }
        Ok(())
    }

    pub fn q_values(&self, state: &PolicyState<T>, head: usize) -> Result<Vec<T>> {
        self.check_head(head)?;
        let h = self.trunk.forward(&Tensor::vector(state.features.clone())?)?;
        Ok(self.heads[head].forward(&h)?.into_values())
    }

    /// `max` over legal actions of each next state, through the matching head.
    fn bootstrap_values(&self, batch: &[&Transition<T>]) -> Result<Vec<T>> {
        let b = batch.len();
        let dim = self.input_dim();
        let x: Vec<T> = batch.iter().flat_map(|t| t.next_state.features.iter().copied()).collect();
        let h = self.trunk.forward(&Tensor::matrix(b, dim, x)?)?;
        let mut values = vec![T::zero(); b];
        for (head_idx, head) in self.heads.iter().enumerate() {
            let rows: Vec<usize> = (0..b).filter(|&r| batch[r].head == head_idx).collect();
            if rows.is_empty() {
                continue;
            }
            let hx: Vec<T> = rows.iter().flat_map(|&r| h.row(r).iter().copied()).collect();
            let q = head.forward(&Tensor::matrix(rows.len(), h.cols(), hx)?)?;
            for (i, &r) in rows.iter().enumerate() {
                let a = super::masked_argmax(q.row(i), &batch[r].next_state.mask);
                values[r] = q.row(i)[a.0];
            }
        }
        Ok(values)
    }

    /// One TD step on `batch`: target `r` for terminal transitions, else
    /// `r + γ·max_a' Q_target(s', a')` over legal `a'`. Minimizes the mean
    /// squared TD error with a single Adam update of the trunk and the heads
    /// that appear in the batch. Returns the mean squared TD error before
    /// the update.
    pub fn train_batch(
        &mut self,
        target: &MultiHeadQNet<T>,
        batch: &[&Transition<T>],
        gamma: f64,
        optimizer: &mut AdamState<T>,
    ) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma {gamma} outside [0, 1)")));
        }
        let b = batch.len();
        let dim = self.input_dim();
        let actions = self.action_count();
        for t in batch {
            self.check_head(t.head)?;
            if t.state.features.len() != dim || t.next_state.features.len() != dim {
                return Err(Error::shape(format!("transition features must have length {dim}")));
            }
            if t.action.0 >= actions || !t.state.is_legal(t.action) {
                return Err(Error::invalid(format!("transition action {} is not legal", t.action)));
            }
        }

        let g = T::lit(gamma);
        let next_values = target.bootstrap_values(batch)?;
        let targets: Vec<T> = batch
            .iter()
            .zip(&next_values)
            .map(|(t, &v)| if t.done { t.reward } else { t.reward + g * v })
            .collect();

        let x: Vec<T> = batch.iter().flat_map(|t| t.state.features.iter().copied()).collect();
        let trunk_trace = self.trunk.forward_trace(&Tensor::matrix(b, dim, x)?)?;
        let h = trunk_trace.output();
        let width = h.cols();
        let inv_b = T::one() / T::from_usize_lossy(b);
        let two = T::lit(2.0);

        let mut loss = T::zero();
        let mut h_grad = vec![T::zero(); b * width];
        let mut head_grads: Vec<Option<Grads<T>>> = vec![None; self.heads.len()];
        for (head_idx, head) in self.heads.iter().enumerate() {
            let rows: Vec<usize> = (0..b).filter(|&r| batch[r].head == head_idx).collect();
            if rows.is_empty() {
                continue;
            }
            let hx: Vec<T> = rows.iter().flat_map(|&r| h.row(r).iter().copied()).collect();
            let trace = head.forward_trace(&Tensor::matrix(rows.len(), width, hx)?)?;
            let q = trace.output();
            let mut dq = vec![T::zero(); rows.len() * actions];
            for (i, &r) in rows.iter().enumerate() {
                let a = batch[r].action.0;
                let err = q.row(i)[a] - targets[r];
                loss = loss + err * err * inv_b;
                dq[i * actions + a] = two * err * inv_b;
            }
            let bp = head.backward(&trace, &Tensor::matrix(rows.len(), actions, dq)?)?;
            for (i, &r) in rows.iter().enumerate() {
                h_grad[r * width..(r + 1) * width].copy_from_slice(bp.input_grad.row(i));
            }
            head_grads[head_idx] = Some(bp.grads);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite TD loss {loss}")));
        }
        let trunk_bp = self.trunk.backward(&trunk_trace, &Tensor::matrix(b, width, h_grad)?)?;

        let mut grads: Vec<Option<&[T]>> = trunk_bp.grads.slices().into_iter().map(Some).collect();
        for (head, hg) in self.heads.iter().zip(&head_grads) {
            match hg {
                Some(g) => grads.extend(g.slices().into_iter().map(Some)),
                None => grads.extend(std::iter::repeat_n(None, head.param_slices().len())),
            }
        }
        let mut params: Vec<&mut [T]> = self.trunk.param_slices_mut();
        for head in &mut self.heads {
            params.extend(head.param_slices_mut());
        }
        optimizer.update(&mut params, &grads)?;
        Ok(loss)
    }

    /// Value copy for use as a frozen target.
    pub fn sync_target(&self) -> MultiHeadQNet<T> {
        self.clone()
    }
}

/// On-disk agent: `{config, trunk, heads, train_step}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct AgentCheckpoint<T: Real> {
    pub config: AgentConfig,
    pub trunk: Mlp<T>,
    pub heads: Vec<Mlp<T>>,
    pub train_step: u64,
}

impl<T: Real> AgentCheckpoint<T> {
    pub fn new(config: &AgentConfig, net: &MultiHeadQNet<T>, train_step: u64) -> Self {
        Self {
            config: config.clone(),
            trunk: net.trunk.clone(),
            heads: net.heads.clone(),
            train_step,
        }
    }

    pub fn into_net(self) -> Result<MultiHeadQNet<T>> {
        let net = MultiHeadQNet::from_parts(self.trunk, self.heads)?;
        if net.input_dim() != self.config.input_dim || net.head_count() != self.config.heads {
            return Err(Error::Checkpoint(format!(
                "agent checkpoint network ({} inputs, {} heads) disagrees with its config ({} inputs, {} heads)",
                net.input_dim(),
                net.head_count(),
                self.config.input_dim,
                self.config.heads
            )));
        }
        Ok(net)
    }
}
