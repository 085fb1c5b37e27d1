use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::error::{Error, Result};
use crate::m2vae::VaeConfig;
use crate::perceived::EnvConfig;
use crate::world::{ObservationModel, WorldConfig};

/// Name of the environment variable that replaces every seed in a config.
pub const SEED_ENV_VAR: &str = "EPISTEME_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Master seed for episode layouts and the training loop's random streams.
    pub seed: u64,
    /// Agent requests spent on training.
    pub train_requests: u64,
    pub eval_episodes: usize,
    /// Base of the evaluation episode seeds, shared by every policy.
    pub eval_seed: u64,
    /// Overwrite the agent checkpoint every this many episodes; 0 writes only
    /// the final one.
    pub checkpoint_every: u64,
    /// Store wall-clock durations in metrics; off keeps metrics files
    /// byte-reproducible.
    pub record_timing: bool,
    pub out_dir: PathBuf,
    pub vae_checkpoint: Option<PathBuf>,
    pub agent_checkpoint: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            train_requests: 50_000,
            eval_episodes: 100,
            eval_seed: 1_000_000,
            checkpoint_every: 0,
            record_timing: false,
            out_dir: PathBuf::from("runs"),
            vae_checkpoint: None,
            agent_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub vae: VaeConfig,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub run: RunSection,
}

impl RunConfig {
    /// The observation model every world in this crate uses.
    pub fn observation_model(&self) -> ObservationModel {
        ObservationModel::ambiguity_triangle()
    }

    /// Section checks, then the relations between sections.
    pub fn validate(&self) -> Result<()> {
        let model = self.observation_model();
        self.world.validate(&model)?;
        self.vae.validate()?;
        self.env.validate()?;
        self.agent.validate()?;

        if self.vae.modalities != model.modalities() {
            return Err(Error::Config(format!(
                "vae.modalities = {} but the world observes {} modalities",
                self.vae.modalities,
                model.modalities()
            )));
        }
        if self.vae.obs_dims != model.obs_dims() {
            return Err(Error::Config(format!(
                "vae.obs_dims = {:?} but the world emits observations of sizes {:?}",
                self.vae.obs_dims,
                model.obs_dims()
            )));
        }
        if self.agent.heads != self.vae.modalities {
            return Err(Error::Config(format!(
                "agent.heads = {} must equal vae.modalities = {}",
                self.agent.heads, self.vae.modalities
            )));
        }
        let state_dim = self.env.state_dim(self.vae.latent_dim);
        if self.agent.input_dim != state_dim {
            return Err(Error::Config(format!(
                "agent.input_dim = {} but env.candidates = {} with vae.latent_dim = {} gives states of length {}",
                self.agent.input_dim, self.env.candidates, self.vae.latent_dim, state_dim
            )));
        }
        Ok(())
    }

    /// Sets the run, world, VAE and agent seeds to `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.world.seed = seed;
        self.vae.seed = seed;
        self.agent.seed = seed;
    }

    /// Applies [`SEED_ENV_VAR`] when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV_VAR) {
            Ok(raw) => {
                let seed = raw.trim().parse::<u64>().map_err(|e| {
                    Error::Config(format!("{SEED_ENV_VAR}={raw:?} is not an unsigned integer: {e}"))
                })?;
                self.override_seed(seed);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV_VAR}: {e}"))),
        }
    }
}

/// Parses a JSON config, filling absent fields with defaults. An empty or
/// whitespace-only text is the default config.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = if text.trim().is_empty() {
        RunConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(parse_config("  \n").unwrap(), RunConfig::default());
        assert_eq!(parse_config("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = parse_config(r#"{"env": {"kappa": 2.0}, "run": {"seed": 9}}"#).unwrap();
        assert_eq!(cfg.env.kappa, 2.0);
        assert_eq!(cfg.env.candidates, 2);
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.agent, AgentConfig::default());
    }

    #[test]
    fn input_dim_mismatch_names_fields() {
        let err = parse_config(r#"{"agent": {"input_dim": 5}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("agent.input_dim") && msg.contains("env.candidates"), "{msg}");
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let err = parse_config("{\n  \"env\": {\"kapa\": 1.0}\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(parse_config(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn std_flag_changes_expected_input() {
        assert!(parse_config(r#"{"env": {"include_std_in_state": true}}"#).is_err());
        let ok = r#"{"env": {"include_std_in_state": true}, "agent": {"input_dim": 10}}"#;
        assert!(parse_config(ok).is_ok());
    }

    #[test]
    fn seed_override_touches_every_section() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(17);
        assert_eq!(
            (cfg.run.seed, cfg.world.seed, cfg.vae.seed, cfg.agent.seed),
            (17, 17, 17, 17)
        );
    }
}
