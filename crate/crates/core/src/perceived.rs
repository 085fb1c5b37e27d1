//! The environment as the agent experiences it.
//!
//! Wraps a [`GridWorld`] with one latent belief and one visit mask per PoI.
//! Each step drives a robot to a candidate PoI, fuses the fresh observation
//! into that PoI's belief with the VAE and pays the KL shift between the old
//! and the new belief, minus a movement penalty.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::m2vae::{LatentEmbedding, M2Vae, ObservationSet};
use crate::scalar::Real;
use crate::world::{GridWorld, ModalityMask, RobotPose, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(z_old ‖ z_new)`
    OldToNew,
    /// `KL(z_new ‖ z_old)`
    NewToOld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Number of candidate PoI slots `I` in the policy state.
    pub candidates: usize,
    pub kappa: f64,
    /// Reward subtracted per grid cell travelled.
    pub movement_penalty: f64,
    /// Episode budget in rounds of `K` agent requests.
    pub max_rounds: usize,
    pub kl_direction: KlDirection,
    pub include_std_in_state: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            candidates: 2,
            kappa: 1.0,
            movement_penalty: 0.01,
            max_rounds: 40,
            kl_direction: KlDirection::OldToNew,
            include_std_in_state: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.candidates == 0 {
            return fail("env.candidates must be at least 1".into());
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return fail(format!("env.kappa {} must be positive", self.kappa));
        }
        if !(self.movement_penalty >= 0.0 && self.movement_penalty.is_finite()) {
            return fail(format!(
                "env.movement_penalty {} must be >= 0",
                self.movement_penalty
            ));
        }
        if self.max_rounds == 0 {
            return fail("env.max_rounds must be at least 1".into());
        }
        Ok(())
    }

    /// Length of the policy-state feature vector.
    pub fn state_dim(&self, latent_dim: usize) -> usize {
        let per_slot = if self.include_std_in_state {
            2 * latent_dim
        } else {
            latent_dim
        };
        self.candidates * per_slot + self.candidates
    }
}

/// Index into `(slot_0, ..., slot_{I-1}, NOP)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionIndex(pub usize);

impl ActionIndex {
    pub fn nop(candidates: usize) -> Self {
        Self(candidates)
    }

    pub fn is_nop(self, candidates: usize) -> bool {
        self.0 == candidates
    }
}

impl fmt::Display for ActionIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Fixed-size view handed to the policy for one robot: candidate means,
/// optionally stds, then scaled distances, plus the slot validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PolicyState<T> {
    pub features: Vec<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> PolicyState<T> {
    pub fn slots(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }

    /// Valid slots plus NOP.
    pub fn legal_actions(&self) -> Vec<ActionIndex> {
        self.valid_slots()
            .map(ActionIndex)
            .chain(std::iter::once(ActionIndex::nop(self.slots())))
            .collect()
    }

    pub fn is_legal(&self, action: ActionIndex) -> bool {
        action.is_nop(self.slots()) || self.mask.get(action.0).copied().unwrap_or(false)
    }
}

/// `S = (Z, V, T_1..T_K)` plus the agent-request counter.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState<T> {
    pub embeddings: Vec<LatentEmbedding<T>>,
    pub visits: Vec<ModalityMask>,
    pub poses: Vec<RobotPose>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo<T> {
    pub robot: usize,
    pub modality: usize,
    pub action: ActionIndex,
    pub poi: Option<usize>,
    pub kl: T,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<T> {
    pub next_state: PolicyState<T>,
    pub reward: T,
    pub done: bool,
    pub info: StepInfo<T>,
}

/// One line of the episode trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub t: usize,
    pub k: usize,
    pub modality: usize,
    pub action: usize,
    pub poi: Option<usize>,
    pub r_k: f64,
    pub kl: f64,
    pub distance: u32,
    pub done: bool,
}

impl<T: Real> StepResult<T> {
    /// Trace line for this step; `t` is the request index within the episode.
    pub fn trace(&self, t: usize) -> TraceRecord {
        TraceRecord {
            t,
            k: self.info.robot,
            modality: self.info.modality,
            action: self.info.action.0,
            poi: self.info.poi,
            r_k: self.reward.as_f64(),
            kl: self.info.kl.as_f64(),
            distance: self.info.distance,
            done: self.done,
        }
    }
}

/// `kappa · KL` between successive beliefs in the configured direction.
pub fn epistemic_reward<T: Real>(
    z_old: &LatentEmbedding<T>,
    z_new: &LatentEmbedding<T>,
    kappa: f64,
    direction: KlDirection,
) -> Result<T> {
    let kl = match direction {
        KlDirection::OldToNew => z_old.kl_to(z_new)?,
        KlDirection::NewToOld => z_new.kl_to(z_old)?,
    };
    Ok(T::lit(kappa) * kl)
}

/// Mean of the per-robot rewards of one round.
pub fn team_reward<T: Real>(rewards: &[T]) -> Result<T> {
    if rewards.is_empty() {
        return Err(Error::invalid("team reward of an empty round"));
    }
    Ok(rewards.iter().copied().sum::<T>() / T::from_usize_lossy(rewards.len()))
}

pub struct PerceivedEnv<'a, T: Real> {
    world: GridWorld,
    vae: &'a M2Vae<T>,
    config: EnvConfig,
    state: BeliefState<T>,
    done: bool,
}

impl<'a, T: Real> PerceivedEnv<'a, T> {
    /// Resets the world and sets every belief to the prior `N(0, I)`.
    /// Returns the environment and the initial policy state of every robot.
    pub fn reset(
        world_config: &WorldConfig,
        vae: &'a M2Vae<T>,
        config: &EnvConfig,
    ) -> Result<(Self, Vec<PolicyState<T>>)> {
        let world = crate::world::reset_world(world_config)?;
        Self::from_world(world, vae, config)
    }

    pub fn from_world(
        world: GridWorld,
        vae: &'a M2Vae<T>,
        config: &EnvConfig,
    ) -> Result<(Self, Vec<PolicyState<T>>)> {
        config.validate()?;
        let model = world.model();
        if vae.modalities() != model.modalities() || vae.config().obs_dims != model.obs_dims() {
            return Err(Error::Checkpoint(format!(
                "VAE expects {} modalities with sizes {:?}, world produces {} with sizes {:?}",
                vae.modalities(),
                vae.config().obs_dims,
                model.modalities(),
                model.obs_dims()
            )));
        }
        let n = world.pois().len();
        let state = BeliefState {
            embeddings: vec![LatentEmbedding::prior(vae.latent_dim()); n],
            visits: vec![ModalityMask::EMPTY; n],
            poses: world.robots().to_vec(),
            t: 0,
        };
        let env = Self {
            world,
            vae,
            config: config.clone(),
            state,
            done: false,
        };
        let states = (0..env.robot_count())
            .map(|k| env.build_policy_state(k))
            .collect();
        Ok((env, states))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &BeliefState<T> {
        &self.state
    }

    pub fn world(&self) -> &GridWorld {
        &self.world
    }

    pub fn robot_count(&self) -> usize {
        self.world.robots().len()
    }

    pub fn robot_modality(&self, robot: usize) -> usize {
        self.world.robots()[robot].modality
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim(self.vae.latent_dim())
    }

    /// Agent requests allowed per episode.
    pub fn request_budget(&self) -> usize {
        self.config.max_rounds * self.robot_count()
    }

    pub fn candidates(&self, robot: usize) -> Vec<usize> {
        self.world
            .candidate_pois(robot, &self.state.visits, self.config.candidates)
    }

    pub fn build_policy_state(&self, robot: usize) -> PolicyState<T> {
        let slots = self.config.candidates;
        let d = self.vae.latent_dim();
        let cands = self.candidates(robot);
        let scale = T::one() / T::lit(f64::from(self.world.config().width + self.world.config().height));

        let mut means = vec![T::zero(); slots * d];
        let mut stds = vec![T::zero(); slots * d];
        let mut dists = vec![T::zero(); slots];
        let mut mask = vec![false; slots];
        for (i, &n) in cands.iter().enumerate() {
            let z = &self.state.embeddings[n];
            means[i * d..(i + 1) * d].copy_from_slice(&z.mean);
            stds[i * d..(i + 1) * d].copy_from_slice(&z.std);
            dists[i] = T::lit(f64::from(self.world.path_distance(robot, n))) * scale;
            mask[i] = true;
        }
        let mut features = means;
        if self.config.include_std_in_state {
            features.extend(stds);
        }
        features.extend(dists);
        PolicyState { features, mask }
    }

    /// Executes `action` for `robot`.
    ///
    /// A candidate slot drives to that PoI, fuses the observation and marks
    /// the robot's modality as seen there. NOP marks every current candidate
    /// of the robot as seen by its modality and pays nothing.
    pub fn step<R: Rng + ?Sized>(&mut self, robot: usize, action: ActionIndex, rng: &mut R) -> Result<StepResult<T>> {
        if self.done {
            return Err(Error::invalid("step called on a finished episode"));
        }
        if robot >= self.robot_count() {
            return Err(Error::invalid(format!("robot {robot} out of range")));
        }
        let slots = self.config.candidates;
        if action.0 > slots {
            return Err(Error::invalid(format!("action {action} outside 0..={slots}")));
        }
        let modality = self.robot_modality(robot);
        let cands = self.candidates(robot);

        let (reward, poi, kl, distance) = if action.is_nop(slots) {
            for &n in &cands {
                self.state.visits[n].insert(modality);
            }
            (T::zero(), None, T::zero(), 0)
        } else {
            let &n = cands.get(action.0).ok_or_else(|| {
                Error::invalid(format!(
                    "action {action} selects an empty slot ({} candidates)",
                    cands.len()
                ))
            })?;
            let (obs, distance) = self.world.execute_drive(robot, n, rng);
            let fresh = ObservationSet::single(
                self.vae.modalities(),
                modality,
                obs.vector.iter().map(|&v| T::lit(v)).collect(),
            );
            let z_old = &self.state.embeddings[n];
            let z_new = self.vae.fuse(z_old, &fresh, self.state.visits[n])?;
            let kl = epistemic_reward(z_old, &z_new, 1.0, self.config.kl_direction)?;
            let reward = T::lit(self.config.kappa) * kl
                - T::lit(self.config.movement_penalty * f64::from(distance));
            self.state.embeddings[n] = z_new;
            self.state.visits[n].insert(modality);
            self.state.poses[robot] = self.world.robots()[robot];
            (reward, Some(n), kl, distance)
        };

        self.state.t += 1;
        let m = self.vae.modalities();
        self.done = self.state.visits.iter().all(|v| v.is_full(m))
            || self.state.t >= self.request_budget();
        Ok(StepResult {
            next_state: self.build_policy_state(robot),
            reward,
            done: self.done,
            info: StepInfo {
                robot,
                modality,
                action,
                poi,
                kl,
                distance,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::m2vae::VaeConfig;
    use crate::world::{Cell, ObservationModel, Poi};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vae() -> M2Vae<f64> {
        M2Vae::new(&VaeConfig::default()).unwrap()
    }

    fn small_world() -> GridWorld {
        GridWorld::from_parts(
            WorldConfig::default(),
            ObservationModel::ambiguity_triangle(),
            vec![
                Poi::new(Cell::new(2, 0), 1),
                Poi::new(Cell::new(0, 5), 0),
                Poi::new(Cell::new(9, 9), 2),
            ],
            vec![
                RobotPose {
                    cell: Cell::new(0, 0),
                    modality: 0,
                },
                RobotPose {
                    cell: Cell::new(9, 0),
                    modality: 1,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn reset_uses_prior_and_clear_masks() {
        let v = vae();
        let (env, states) = PerceivedEnv::reset(&WorldConfig::default(), &v, &EnvConfig::default()).unwrap();
        assert!(env
            .state()
            .embeddings
            .iter()
            .all(|z| z == &LatentEmbedding::prior(2)));
        assert!(env.state().visits.iter().all(|m| m.is_empty()));
        assert_eq!(env.state().t, 0);
        assert_eq!(states.len(), 3);
        assert!(states.iter().all(|s| s.features.len() == 6));
        let (_, again) = PerceivedEnv::reset(&WorldConfig::default(), &v, &EnvConfig::default()).unwrap();
        assert_eq!(states, again);
    }

    #[test]
    fn reset_rejects_mismatched_vae() {
        let cfg = VaeConfig {
            obs_dims: vec![3, 2],
            ..VaeConfig::default()
        };
        let v = M2Vae::<f64>::new(&cfg).unwrap();
        let err = PerceivedEnv::reset(&WorldConfig::default(), &v, &EnvConfig::default()).err().unwrap();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn policy_state_layout() {
        let v = vae();
        let (env, states) = PerceivedEnv::from_world(small_world(), &v, &EnvConfig::default()).unwrap();
        // robot 0 at origin: PoI 0 at distance 2, PoI 1 at distance 5
        assert_eq!(env.candidates(0), vec![0, 1]);
        let s = &states[0];
        assert_eq!(s.mask, vec![true, true]);
        assert_eq!(&s.features[..4], &[0.0; 4]);
        assert!((s.features[4] - 2.0 / 20.0).abs() < 1e-15);
        assert!((s.features[5] - 5.0 / 20.0).abs() < 1e-15);
        let with_std = EnvConfig {
            include_std_in_state: true,
            ..EnvConfig::default()
        };
        let (_, states) = PerceivedEnv::from_world(small_world(), &v, &with_std).unwrap();
        assert_eq!(states[0].features.len(), 10);
        assert_eq!(&states[0].features[4..8], &[1.0; 4]);
    }

    #[test]
    fn observing_touches_one_poi() {
        let v = vae();
        let (mut env, _) = PerceivedEnv::from_world(small_world(), &v, &EnvConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = env.state().clone();
        let r = env.step(0, ActionIndex(0), &mut rng).unwrap();
        let after = env.state();
        assert_eq!(r.info.poi, Some(0));
        assert_eq!(r.info.distance, 2);
        assert_eq!(after.visits[0], ModalityMask::single(0));
        assert_ne!(after.embeddings[0], before.embeddings[0]);
        for j in 1..3 {
            assert_eq!(after.visits[j], before.visits[j]);
            assert_eq!(after.embeddings[j], before.embeddings[j]);
        }
        assert_eq!(after.poses[0].cell, Cell::new(2, 0));
        assert!((r.reward - (r.info.kl - 0.02)).abs() < 1e-12);
        assert_eq!(after.t, 1);
        // PoI 0 is no longer a candidate for modality 0
        assert_eq!(env.candidates(0), vec![1, 2]);
        assert_eq!(env.candidates(1), vec![0, 2]);
    }

    #[test]
    fn nop_retires_current_candidates() {
        let v = vae();
        let (mut env, _) = PerceivedEnv::from_world(small_world(), &v, &EnvConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = env.step(0, ActionIndex::nop(2), &mut rng).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.info.poi, None);
        assert!(env.state().visits[0].contains(0) && env.state().visits[1].contains(0));
        assert!(!env.state().visits[2].contains(0));
        assert_eq!(r.next_state.mask, vec![true, false]);
        env.step(0, ActionIndex::nop(2), &mut rng).unwrap();
        let before = env.state().clone();
        let r = env.step(0, ActionIndex::nop(2), &mut rng).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(env.state().visits, before.visits);
        assert_eq!(env.state().embeddings, before.embeddings);
        assert_eq!(r.next_state.mask, vec![false, false]);
        assert!(r.next_state.features.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn masked_slot_is_an_error() {
        let v = vae();
        let (mut env, _) = PerceivedEnv::from_world(small_world(), &v, &EnvConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        env.step(0, ActionIndex::nop(2), &mut rng).unwrap();
        assert!(env.step(0, ActionIndex(1), &mut rng).is_err());
        assert!(env.step(0, ActionIndex(3), &mut rng).is_err());
    }

    #[test]
    fn episode_ends_when_everything_seen() {
        let v = vae();
        let (mut env, _) = PerceivedEnv::from_world(small_world(), &v, &EnvConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut steps = 0;
        'outer: loop {
            for k in 0..2 {
                let r = env.step(k, ActionIndex(0), &mut rng).unwrap();
                steps += 1;
                if r.done {
                    break 'outer;
                }
            }
        }
        assert_eq!(steps, 6);
        assert!(env.state().visits.iter().all(|m| m.is_full(2)));
        assert!(env.step(0, ActionIndex::nop(2), &mut rng).is_err());
    }

    #[test]
    fn step_budget_ends_episode() {
        let v = vae();
        let cfg = EnvConfig {
            max_rounds: 2,
            ..EnvConfig::default()
        };
        let (mut env, _) = PerceivedEnv::from_world(small_world(), &v, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nop = ActionIndex::nop(2);
        assert!(!env.step(0, nop, &mut rng).unwrap().done);
        assert!(!env.step(1, nop, &mut rng).unwrap().done);
        assert!(!env.step(0, nop, &mut rng).unwrap().done);
        assert!(env.step(1, nop, &mut rng).unwrap().done);
    }

    #[test]
    fn reward_examples() {
        let a = LatentEmbedding::<f64>::new(vec![0.0], vec![1.0]).unwrap();
        let b = LatentEmbedding::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(epistemic_reward(&a, &a, 1.0, KlDirection::OldToNew).unwrap(), 0.0);
        let r = epistemic_reward(&a, &b, 1.0, KlDirection::OldToNew).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        let wide = LatentEmbedding::new(vec![0.0], vec![2.0]).unwrap();
        let fwd = epistemic_reward(&wide, &a, 1.0, KlDirection::OldToNew).unwrap();
        let rev = epistemic_reward(&wide, &a, 1.0, KlDirection::NewToOld).unwrap();
        assert!((fwd - 0.806_852_819_440_054_7).abs() < 1e-12);
        assert!((rev - wide.kl_to(&a).unwrap()).abs() > 0.1);
        assert!((epistemic_reward(&wide, &a, 3.0, KlDirection::OldToNew).unwrap() - 3.0 * fwd).abs() < 1e-12);
    }

    #[test]
    fn team_reward_is_mean() {
        assert!((team_reward::<f64>(&[0.5, 0.1, 0.0]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(team_reward(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(team_reward(&[0.7]).unwrap(), 0.7);
        assert!(team_reward::<f64>(&[]).is_err());
    }
}
