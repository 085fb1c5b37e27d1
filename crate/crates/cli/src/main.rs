use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use episteme_core::harness::{
    load_agent, load_config, load_vae, run_eval, run_gen_dataset, run_pretrain, run_train, PolicyKind,
    RunConfig,
};
use episteme_core::Error;

/// Multi-robot active sensing: VAE pre-training and meta-agent training.
#[derive(Parser)]
#[command(name = "episteme", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pre-training dataset (JSON Lines).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sample count; defaults to vae.dataset_size.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pre-train the multi-modal VAE.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to run.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the meta-agent against a frozen VAE.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to run.vae_checkpoint.
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a policy with epsilon 0.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Defaults to run.agent_checkpoint; only the learned policy needs it.
        #[arg(long)]
        agent: Option<PathBuf>,
        #[arg(long, default_value = "learned", value_parser = parse_policy)]
        policy: PolicyKind,
        /// Defaults to run.eval_episodes.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Divergence(_) => 3,
        Error::Io { .. } => 4,
        _ => 1,
    }
}

fn config(path: Option<&Path>) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn required(arg: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf, Error> {
    arg.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given on the command line or in the config")))
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    Ok(match cli.command {
        Command::GenData { config: c, out, n } => {
            let cfg = config(c.as_deref())?;
            let count = run_gen_dataset(&cfg, &out, n.unwrap_or(cfg.vae.dataset_size))?;
            serde_json::json!({ "samples": count, "path": out })
        }
        Command::Pretrain { config: c, data, out } => {
            let cfg = config(c.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.run.out_dir.clone());
            serde_json::to_value(run_pretrain(&cfg, &data, &out)?)?
        }
        Command::Train { config: c, vae, out } => {
            let cfg = config(c.as_deref())?;
            let vae = load_vae(&cfg, &required(vae, &cfg.run.vae_checkpoint, "VAE checkpoint")?)?;
            let out = out.unwrap_or_else(|| cfg.run.out_dir.clone());
            serde_json::to_value(run_train(&cfg, &vae, &out)?)?
        }
        Command::Eval {
            config: c,
            vae,
            agent,
            policy,
            episodes,
            out,
        } => {
            let cfg = config(c.as_deref())?;
            let vae = load_vae(&cfg, &required(vae, &cfg.run.vae_checkpoint, "VAE checkpoint")?)?;
            let net = match policy {
                PolicyKind::Learned => Some(load_agent(
                    &cfg,
                    &required(agent, &cfg.run.agent_checkpoint, "agent checkpoint")?,
                )?),
                _ => None,
            };
            let out = out.unwrap_or_else(|| cfg.run.out_dir.clone());
            let episodes = episodes.unwrap_or(cfg.run.eval_episodes);
            serde_json::to_value(run_eval(&cfg, &vae, net.as_ref(), policy, episodes, &out)?)?
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
