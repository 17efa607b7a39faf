//! Warm-up plus group-relative policy optimization on simulated episodes.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsim::{derive_seed, gen_demonstrations, EpisodeSpec};
use crate::grpo::{grpo_step, sft_warmup, GrpoError, OptimizerConfig, ParamUpdater, Rollout, RolloutGroup, SftReport};
use crate::policy::{Policy, PolicyError, TokenId};
use crate::rewards::{step_reward, OptionScheme, RewardConfig, RewardConfigError, RewardMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardConfigError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training episodes")]
    NoEpisodes,
    #[error("training callback failed: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    /// Optimization steps after the warm-up.
    pub steps: usize,
    /// Episodes per step; each contributes one group of rollouts.
    pub prompts_per_step: usize,
    /// Supervised demonstrations for the warm-up; 0 skips it.
    pub demonstrations: usize,
    pub temperature: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 2000,
            prompts_per_step: 8,
            demonstrations: 6000,
            temperature: 1.0,
        }
    }
}

/// Scoring context shared by training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSetup {
    pub config: RewardConfig,
    pub scheme: OptionScheme,
    pub mode: RewardMode,
}

impl RewardSetup {
    pub fn new(mode: RewardMode) -> Self {
        RewardSetup {
            config: RewardConfig::default(),
            scheme: OptionScheme::default(),
            mode,
        }
    }

    pub fn score(&self, response: &str, episode: &EpisodeSpec) -> Result<f64, RewardConfigError> {
        Ok(step_reward(response, &episode.truth, &self.scheme, self.mode, &self.config)?.total)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub warmup: SftReport,
    pub steps: Vec<StepLog>,
}

/// Whether a (user, video) pair belongs to the held-out split. The
/// assignment depends only on the ids, so it is stable across runs.
pub fn is_held_out(user_id: &str, video_id: &str, fraction: f64) -> bool {
    let h = derive_seed(&["split", user_id, video_id]);
    (h as f64 / u64::MAX as f64) < fraction
}

/// Splits episodes into (train, held-out).
pub fn split_episodes(episodes: &[EpisodeSpec], held_out_fraction: f64) -> (Vec<EpisodeSpec>, Vec<EpisodeSpec>) {
    episodes
        .iter()
        .cloned()
        .partition(|e| !is_held_out(&e.user_id, &e.video_id, held_out_fraction))
}

/// Samples a group of responses for one episode and scores them.
pub fn sample_group<P: Policy>(
    policy: &P,
    reference: &P,
    episode: &EpisodeSpec,
    rewards: &RewardSetup,
    config: &OptimizerConfig,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutGroup, TrainError> {
    let mut rollouts = Vec::with_capacity(config.group_size);
    for _ in 0..config.group_size {
        let sampled = policy.sample(&episode.prompt_tokens, config.max_generation_length, temperature, rng.next_u64())?;
        let text = policy.vocab().decode(&sampled.tokens);
        let logp_ref = reference.logprobs(&episode.prompt_tokens, &sampled.tokens)?;
        rollouts.push(Rollout {
            reward: rewards.score(&text, episode)?,
            response_tokens: sampled.tokens,
            logp_old: sampled.logp,
            logp_ref,
        });
    }
    Ok(RolloutGroup {
        prompt: episode.prompt_tokens.clone(),
        rollouts,
    })
}

/// Runs the warm-up on demonstrations drawn from `episodes`, freezes the
/// result as the reference policy, then optimizes the policy on `episodes`.
/// `on_step` sees every step's log line and the updated policy.
pub fn run_training<P, F>(
    policy: &mut P,
    episodes: &[EpisodeSpec],
    rewards: &RewardSetup,
    optimizer: &OptimizerConfig,
    settings: &TrainSettings,
    seed: u64,
    mut on_step: F,
) -> Result<TrainReport, TrainError>
where
    P: Policy + Clone,
    F: FnMut(&StepLog, &P) -> Result<(), String>,
{
    optimizer.validate().map_err(TrainError::Config)?;
    rewards.scheme.validate()?;
    if episodes.is_empty() {
        return Err(TrainError::NoEpisodes);
    }
    let demos: Vec<(Vec<TokenId>, Vec<TokenId>)> = gen_demonstrations(episodes, settings.demonstrations, seed)
        .into_iter()
        .map(|d| (d.prompt_tokens, d.response_tokens))
        .collect();
    let mut warm_updater = ParamUpdater::new(optimizer, policy.param_count());
    let warmup = sft_warmup(policy, &mut warm_updater, &demos, optimizer, seed)?;
    let reference = policy.clone();

    let mut updater = ParamUpdater::new(optimizer, policy.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut steps = Vec::with_capacity(settings.steps);
    for step in 1..=settings.steps {
        let mut groups = Vec::with_capacity(settings.prompts_per_step);
        for _ in 0..settings.prompts_per_step {
            if order.is_empty() {
                order = (0..episodes.len()).collect();
                order.shuffle(&mut rng);
            }
            let ep = &episodes[order.pop().unwrap()];
            groups.push(sample_group(policy, &reference, ep, rewards, optimizer, settings.temperature, &mut rng)?);
        }
        let d = grpo_step(policy, &mut updater, &groups, optimizer)?;
        let log = StepLog {
            step,
            objective: d.objective,
            mean_reward: d.mean_reward,
            mean_kl: d.mean_kl,
            clip_fraction: d.clip_fraction,
            grad_norm: d.grad_norm,
        };
        on_step(&log, policy).map_err(TrainError::Callback)?;
        steps.push(log);
    }
    Ok(TrainReport { warmup, steps })
}
