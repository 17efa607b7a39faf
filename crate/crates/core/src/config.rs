//! Run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{DecodeParams, PipelineConfig, RemoteConfig};
use crate::deploy::DeployConfig;
use crate::envsim::{vocabulary, WorldConfig};
use crate::eval::EvalSplit;
use crate::grpo::OptimizerConfig;
use crate::policy::{BagPolicy, Policy, PolicyError, ToyPolicy};
use crate::rewards::{OptionScheme, RewardConfig};
use crate::train::{RewardSetup, TrainSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyArch {
    GatedRecurrent,
    Bag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub arch: PolicyArch,
    /// Hidden width of the recurrent policy.
    pub dim: usize,
    /// Initial weight scale of the bag policy.
    pub init_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            arch: PolicyArch::GatedRecurrent,
            dim: 16,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSection {
    #[serde(flatten)]
    pub values: RewardConfig,
    pub scheme: OptionScheme,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            values: RewardConfig::default(),
            scheme: OptionScheme::default(),
        }
    }
}

/// Which backend answers reason-agent prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonBackendKind {
    /// The trained policy checkpoint.
    Policy,
    /// Decodes the context block and answers with the truth.
    Oracle,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentsConfig {
    pub max_tool_calls: usize,
    pub decode: DecodeParams,
    pub reason_backend: ReasonBackendKind,
    pub remote: RemoteConfig,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        AgentsConfig {
            max_tool_calls: 3,
            decode: DecodeParams::default(),
            reason_backend: ReasonBackendKind::Policy,
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: EvalSplit,
    pub held_out_fraction: f64,
    pub max_generation_length: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: EvalSplit::Implicit,
            held_out_fraction: 0.2,
            max_generation_length: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeploySection {
    pub candidates_per_user: usize,
    pub max_users: Option<usize>,
}

impl Default for DeploySection {
    fn default() -> Self {
        DeploySection {
            candidates_per_user: 10,
            max_users: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub policy: PolicyConfig,
    pub reward: RewardSection,
    pub optimizer: OptimizerConfig,
    pub train: TrainSettings,
    pub agents: AgentsConfig,
    pub eval: EvalConfig,
    pub deploy: DeploySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            world: WorldConfig::default(),
            policy: PolicyConfig::default(),
            reward: RewardSection::default(),
            optimizer: OptimizerConfig::toy_preset(),
            train: TrainSettings::default(),
            agents: AgentsConfig::default(),
            eval: EvalConfig::default(),
            deploy: DeploySection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world.validate().map_err(ConfigError::Invalid)?;
        self.optimizer.validate().map_err(ConfigError::Invalid)?;
        self.reward.scheme.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.policy.dim == 0 {
            return Err(ConfigError::Invalid("policy.dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.eval.held_out_fraction) {
            return Err(ConfigError::Invalid("eval.held_out_fraction must be in [0,1)".into()));
        }
        if self.train.temperature < 0.0 {
            return Err(ConfigError::Invalid("train.temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn reward_setup(&self) -> RewardSetup {
        RewardSetup {
            config: self.reward.values.clone(),
            scheme: self.reward.scheme.clone(),
            mode: self.reward.values.mode,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            max_tool_calls: self.agents.max_tool_calls,
            decode: self.agents.decode,
            scheme: self.reward.scheme.clone(),
        }
    }

    pub fn deploy(&self) -> DeployConfig {
        DeployConfig {
            candidates_per_user: self.deploy.candidates_per_user,
            max_users: self.deploy.max_users,
            pipeline: self.pipeline(),
        }
    }

    /// Fresh recurrent policy over the environment vocabulary.
    pub fn new_recurrent_policy(&self) -> ToyPolicy {
        ToyPolicy::random(vocabulary().clone(), self.policy.dim, self.seed)
    }

    pub fn new_bag_policy(&self) -> BagPolicy {
        BagPolicy::random(vocabulary().clone(), self.seed, self.policy.init_std)
    }
}

/// Loads a recurrent policy checkpoint and checks it against the environment vocabulary.
pub fn load_policy(path: &Path) -> Result<ToyPolicy, PolicyError> {
    let p = ToyPolicy::load(path)?;
    if p.vocab() != vocabulary() {
        return Err(PolicyError::Checkpoint("checkpoint vocabulary differs from the environment's".into()));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::RewardMode;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[reward]\nmode = \"flat_baseline\"\n[world]\nn_users = 5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.reward.values.mode, RewardMode::FlatBaseline);
        assert_eq!(c.world.n_users, 5);
        assert_eq!(c.world.n_videos, WorldConfig::default().n_videos);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[world]\nn_users = 0\n").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nclip_epsilon = -1.0\n").is_err());
        assert!(RunConfig::from_toml("unknown = [").is_err());
    }
}
