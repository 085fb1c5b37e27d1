use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{log_epoch, log_metrics, EpochRecord, MetricsRecord, MetricsSink};
use crate::agent::{
    greedy_nearest_action, random_action, select_action, AgentCheckpoint, EpsilonSchedule, MultiHeadQNet,
    ReplayBuffer, Transition,
};
use crate::diffnet::AdamConfig;
use crate::error::{Error, Result};
use crate::m2vae::{generate_dataset, read_dataset, write_dataset, M2Vae};
use crate::perceived::{team_reward, ActionIndex, PerceivedEnv, PolicyState, StepResult};

pub const VAE_FILE: &str = "vae.json";
pub const PRETRAIN_LOG: &str = "pretrain.jsonl";
pub const AGENT_FILE: &str = "agent.json";
pub const TRAIN_LOG: &str = "metrics.jsonl";
pub const EVAL_LOG: &str = "eval.jsonl";

/// Seed of the `index`-th draw from the stream named `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

const LAYOUT_STREAM: u64 = 1;
const ENV_STREAM: u64 = 2;
const ACTION_STREAM: u64 = 3;
const REPLAY_STREAM: u64 = 4;

fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, 0))
}

fn elapsed_ms(start: Instant, enabled: bool) -> Option<u64> {
    enabled.then(|| start.elapsed().as_millis() as u64)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `n` complete samples, classes round-robin, seeded by `run.seed`.
pub fn run_gen_dataset(config: &RunConfig, out: &Path, n: usize) -> Result<usize> {
    config.validate()?;
    let samples = generate_dataset(
        &config.observation_model(),
        config.world.class_count,
        n,
        config.world.obs_noise,
        config.run.seed,
    );
    write_dataset(out, &samples)?;
    Ok(samples.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Trains a fresh VAE on the dataset at `data`, writing `vae.json` and the
/// per-epoch loss log into `out_dir`.
pub fn run_pretrain(config: &RunConfig, data: &Path, out_dir: &Path) -> Result<PretrainSummary> {
    config.validate()?;
    let cfg = &config.vae;
    let samples = read_dataset(data, cfg.modalities)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("{} holds no samples", data.display())));
    }
    let dataset: Vec<_> = samples.into_iter().map(|s| s.obs).collect();
    ensure_dir(out_dir)?;

    let mut vae = M2Vae::<f64>::new(cfg)?;
    let mut opt = vae.optimizer(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sink = MetricsSink::create(&out_dir.join(PRETRAIN_LOG))?;
    let start = Instant::now();
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for epoch in 1..=cfg.epochs {
        let loss = vae.train_epoch(&dataset, &mut opt, cfg.batch_size, &mut rng)?;
        if epoch == 1 {
            first_loss = loss;
        }
        final_loss = loss;
        log_epoch(
            &mut sink,
            &EpochRecord {
                epoch,
                loss,
                wall_ms: elapsed_ms(start, config.run.record_timing),
            },
        )?;
    }
    let checkpoint = out_dir.join(VAE_FILE);
    write_json(&checkpoint, &vae)?;
    Ok(PretrainSummary {
        checkpoint,
        epochs: cfg.epochs,
        first_loss,
        final_loss,
    })
}

/// Loads a VAE checkpoint and checks it against the config's `vae` section.
pub fn load_vae(config: &RunConfig, path: &Path) -> Result<M2Vae<f64>> {
    let vae: M2Vae<f64> = read_json(path)?;
    let (got, want) = (vae.config(), &config.vae);
    if got.modalities != want.modalities || got.obs_dims != want.obs_dims || got.latent_dim != want.latent_dim {
        return Err(Error::Checkpoint(format!(
            "{}: VAE has {} modalities {:?} and latent size {}, config expects {} modalities {:?} and latent size {}",
            path.display(),
            got.modalities,
            got.obs_dims,
            got.latent_dim,
            want.modalities,
            want.obs_dims,
            want.latent_dim
        )));
    }
    Ok(vae)
}

/// Loads an agent checkpoint and checks its shape against the config.
pub fn load_agent(config: &RunConfig, path: &Path) -> Result<MultiHeadQNet<f64>> {
    let ck: AgentCheckpoint<f64> = read_json(path)?;
    let net = ck.into_net()?;
    let actions = config.env.candidates + 1;
    if net.input_dim() != config.agent.input_dim || net.head_count() != config.agent.heads || net.action_count() != actions {
        return Err(Error::Checkpoint(format!(
            "{}: agent maps {} inputs to {} heads of {} actions, config expects {} inputs, {} heads, {} actions",
            path.display(),
            net.input_dim(),
            net.head_count(),
            net.action_count(),
            config.agent.input_dim,
            config.agent.heads,
            actions
        )));
    }
    Ok(net)
}

/// Per-episode bookkeeping shared by training and evaluation.
struct EpisodeStats {
    team_return: f64,
    length: u64,
    kl_sum: f64,
    observations: u64,
    action_counts: Vec<Vec<u64>>,
}

impl EpisodeStats {
    fn new(modalities: usize, actions: usize) -> Self {
        Self {
            team_return: 0.0,
            length: 0,
            kl_sum: 0.0,
            observations: 0,
            action_counts: vec![vec![0; actions]; modalities],
        }
    }

    fn record(&mut self, result: &StepResult<f64>) {
        self.length += 1;
        self.action_counts[result.info.modality][result.info.action.0] += 1;
        if result.info.poi.is_some() {
            self.kl_sum += result.info.kl;
            self.observations += 1;
        }
    }

    fn finish(self, episode: u64, total_requests: u64, epsilon: f64, wall_ms: Option<u64>) -> MetricsRecord {
        MetricsRecord {
            episode,
            total_requests,
            team_return: self.team_return,
            length: self.length,
            mean_kl: if self.observations == 0 {
                0.0
            } else {
                self.kl_sum / self.observations as f64
            },
            action_counts: self.action_counts,
            epsilon,
            wall_ms,
        }
    }
}

/// One acting robot's part of a round, waiting for the team reward.
struct PendingStep {
    state: PolicyState<f64>,
    action: ActionIndex,
    reward: f64,
    next_state: PolicyState<f64>,
    head: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub episodes: u64,
    pub total_requests: u64,
    pub train_steps: u64,
    /// Mean team return of the last (up to) 100 logged episodes.
    pub recent_mean_return: f64,
}

/// Round-robin DQN training of the meta-agent against a frozen VAE.
///
/// Every round requests the agent once per robot in index order. The K raw
/// rewards of a round are averaged into the team reward, which becomes the
/// reward of all its transitions. Robots left out of a round cut short by
/// the end of the episode count as reward 0. If the episode ends inside a round, every
/// transition of that round is terminal. Training stops after
/// `run.train_requests` requests; an episode cut short by that limit is not
/// logged.
pub fn run_train(config: &RunConfig, vae: &M2Vae<f64>, out_dir: &Path) -> Result<TrainSummary> {
    config.validate()?;
    let ac = &config.agent;
    let actions = config.env.candidates + 1;
    ensure_dir(out_dir)?;

    let mut net = MultiHeadQNet::<f64>::new(ac, actions)?;
    let mut target = net.sync_target();
    let mut opt = net.optimizer(AdamConfig::with_lr(ac.lr));
    let schedule = EpsilonSchedule::new(ac.eps_start, ac.eps_end, ac.eps_decay_steps)?;
    let mut replay = ReplayBuffer::new(ac.replay_capacity);
    let seed = config.run.seed;
    let mut env_rng = rng_for(seed, ENV_STREAM);
    let mut action_rng = rng_for(seed, ACTION_STREAM);
    let mut replay_rng = rng_for(seed, REPLAY_STREAM);

    let metrics_path = out_dir.join(TRAIN_LOG);
    let checkpoint = out_dir.join(AGENT_FILE);
    let mut sink = MetricsSink::create(&metrics_path)?;
    let start = Instant::now();
    let budget = config.run.train_requests;
    let mut requests = 0u64;
    let mut train_steps = 0u64;
    let mut episode = 0u64;
    let mut recent = std::collections::VecDeque::with_capacity(100);

    'episodes: while requests < budget {
        let mut world_cfg = config.world.clone();
        world_cfg.seed = derive_seed(seed ^ config.world.seed, LAYOUT_STREAM, episode);
        let (mut env, _) = PerceivedEnv::reset(&world_cfg, vae, &config.env)?;
        let mut stats = EpisodeStats::new(vae.modalities(), actions);
        while !env.is_done() {
            let mut round = Vec::with_capacity(env.robot_count());
            for k in 0..env.robot_count() {
                if env.is_done() {
                    break;
                }
                if requests >= budget {
                    break 'episodes;
                }
                let state = env.build_policy_state(k);
                let head = env.robot_modality(k);
                let action = select_action(&net, &state, head, schedule.value(requests), &mut action_rng)?;
                let result = env.step(k, action, &mut env_rng)?;
                requests += 1;
                stats.record(&result);
                round.push(PendingStep {
                    state,
                    action,
                    reward: result.reward,
                    next_state: result.next_state,
                    head,
                });

                if requests >= ac.learning_starts && requests % ac.train_every == 0 && !replay.is_empty() {
                    let batch = replay.sample(ac.batch_size, &mut replay_rng);
                    net.train_batch(&target, &batch, ac.gamma, &mut opt)?;
                    train_steps += 1;
                    if train_steps % ac.target_sync_every == 0 {
                        target = net.sync_target();
                    }
                }
            }
            let mut rewards: Vec<f64> = round.iter().map(|p| p.reward).collect();
            rewards.resize(env.robot_count(), 0.0);
            let team = team_reward(&rewards)?;
            stats.team_return += team;
            let done = env.is_done();
            for p in round {
                replay.push(Transition {
                    state: p.state,
                    action: p.action,
                    reward: team,
                    next_state: p.next_state,
                    done,
                    head: p.head,
                });
            }
        }
        let record = stats.finish(
            episode,
            requests,
            schedule.value(requests),
            elapsed_ms(start, config.run.record_timing),
        );
        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(record.team_return);
        log_metrics(&mut sink, &record)?;
        episode += 1;
        let every = config.run.checkpoint_every;
        if every > 0 && episode % every == 0 {
            write_json(&checkpoint, &AgentCheckpoint::new(ac, &net, train_steps))?;
        }
    }
    write_json(&checkpoint, &AgentCheckpoint::new(ac, &net, train_steps))?;
    Ok(TrainSummary {
        checkpoint,
        metrics: metrics_path,
        episodes: episode,
        total_requests: requests,
        train_steps,
        recent_mean_return: if recent.is_empty() {
            0.0
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Learned,
    Random,
    GreedyNearest,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Learned => "learned",
            PolicyKind::Random => "random",
            PolicyKind::GreedyNearest => "greedy_nearest",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(PolicyKind::Learned),
            "random" => Ok(PolicyKind::Random),
            "greedy_nearest" => Ok(PolicyKind::GreedyNearest),
            other => Err(Error::Config(format!(
                "unknown policy {other:?}, expected learned, random or greedy_nearest"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub policy: PolicyKind,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_length: f64,
    pub std_length: f64,
    pub metrics: PathBuf,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Greedy (epsilon 0) rollouts of `policy` on the evaluation seed set.
/// Episode `i` uses the same layout and observation-noise stream for every
/// policy. `agent` is required for [`PolicyKind::Learned`] only.
pub fn run_eval(
    config: &RunConfig,
    vae: &M2Vae<f64>,
    agent: Option<&MultiHeadQNet<f64>>,
    policy: PolicyKind,
    episodes: usize,
    out_dir: &Path,
) -> Result<EvalSummary> {
    config.validate()?;
    let net = match (policy, agent) {
        (PolicyKind::Learned, None) => {
            return Err(Error::Config("the learned policy needs an agent checkpoint".into()))
        }
        (_, a) => a,
    };
    if let Some(net) = net {
        if net.head_count() != vae.modalities() || net.input_dim() != config.env.state_dim(vae.latent_dim()) {
            return Err(Error::Checkpoint(format!(
                "agent has {} heads and {} inputs, environment needs {} and {}",
                net.head_count(),
                net.input_dim(),
                vae.modalities(),
                config.env.state_dim(vae.latent_dim())
            )));
        }
    }
    ensure_dir(out_dir)?;
    let metrics = out_dir.join(EVAL_LOG);
    let mut sink = MetricsSink::create(&metrics)?;
    let actions = config.env.candidates + 1;
    let base = config.run.eval_seed;
    let mut policy_rng = rng_for(base, ACTION_STREAM);
    let start = Instant::now();
    let mut total_requests = 0u64;
    let mut returns = Vec::with_capacity(episodes);
    let mut lengths = Vec::with_capacity(episodes);

    for episode in 0..episodes as u64 {
        let mut world_cfg = config.world.clone();
        world_cfg.seed = derive_seed(base, LAYOUT_STREAM, episode);
        let mut env_rng = ChaCha8Rng::seed_from_u64(derive_seed(base, ENV_STREAM, episode));
        let (mut env, _) = PerceivedEnv::reset(&world_cfg, vae, &config.env)?;
        let mut stats = EpisodeStats::new(vae.modalities(), actions);
        while !env.is_done() {
            let mut rewards = Vec::with_capacity(env.robot_count());
            for k in 0..env.robot_count() {
                if env.is_done() {
                    break;
                }
                let state = env.build_policy_state(k);
                let head = env.robot_modality(k);
                let action = match policy {
                    PolicyKind::Learned => {
                        select_action(net.expect("checked above"), &state, head, 0.0, &mut policy_rng)?
                    }
                    PolicyKind::Random => random_action(&state, &mut policy_rng),
                    PolicyKind::GreedyNearest => greedy_nearest_action(&state),
                };
                let result = env.step(k, action, &mut env_rng)?;
                total_requests += 1;
                stats.record(&result);
                rewards.push(result.reward);
            }
            rewards.resize(env.robot_count(), 0.0);
            stats.team_return += team_reward(&rewards)?;
        }
        let record = stats.finish(
            episode,
            total_requests,
            0.0,
            elapsed_ms(start, config.run.record_timing),
        );
        returns.push(record.team_return);
        lengths.push(record.length as f64);
        log_metrics(&mut sink, &record)?;
    }
    let (mean_return, std_return) = mean_std(&returns);
    let (mean_length, std_length) = mean_std(&lengths);
    Ok(EvalSummary {
        policy,
        episodes,
        mean_return,
        std_return,
        mean_length,
        std_length,
        metrics,
    })
}
