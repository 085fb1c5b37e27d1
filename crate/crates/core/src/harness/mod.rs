//! Pipeline stages: dataset generation, VAE pre-training, meta-agent
//! training and evaluation, with JSON configs and JSON Lines metrics.

mod config;
mod metrics;
mod pipeline;

pub use config::{load_config, parse_config, RunConfig, RunSection, SEED_ENV_VAR};
pub use metrics::{log_epoch, log_metrics, read_epochs, read_metrics, EpochRecord, MetricsRecord, MetricsSink};
pub use pipeline::{
    derive_seed, load_agent, load_vae, read_json, run_eval, run_gen_dataset, run_pretrain, run_train, write_json,
    EvalSummary, PolicyKind, PretrainSummary, TrainSummary, AGENT_FILE, EVAL_LOG, PRETRAIN_LOG, TRAIN_LOG, VAE_FILE,
};
