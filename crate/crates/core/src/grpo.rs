//! Group-relative policy optimization.
//!
//! Rewards of the G responses sampled for one prompt are standardized within
//! the group; every response token then contributes a clipped importance
//! ratio term weighted by its response's advantage, minus a per-token k3 KL
//! penalty against a frozen reference policy:
//!
//! ```text
//! J = 1/G Σ_i 1/|o_i| Σ_t [ min(r·A_i, clip(r, 1−ε, 1+ε)·A_i) − β·k3 ]
//! r  = π_θ(o_i,t) / π_old(o_i,t)
//! k3 = exp(Δ) − Δ − 1,  Δ = log π_ref(o_i,t) − log π_θ(o_i,t)
//! ```
//!
//! The update is gradient ascent on `J` with decoupled weight decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{nll_objective, Policy, PolicyError, TokenId};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group of {0} rollouts is too small (need at least 2)")]
    GroupTooSmall(usize),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("rollout {index}: logp_old/logp_ref/response lengths differ or are empty")]
    MalformedRollout { index: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Plain gradient step.
    Sgd,
    /// Adaptive moments (Adam) with decoupled weight decay.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Passes over the training episodes during reinforcement fine-tuning.
    pub epochs: usize,
    pub max_generation_length: usize,
    pub std_epsilon: f64,
    pub discount: f64,
    /// Optimization passes over each sampled batch. Ratios stay at 1 when this is 1.
    pub inner_epochs: usize,
    pub update_rule: UpdateRule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub sft_epochs: usize,
    pub sft_learning_rate: f64,
    pub sft_batch_size: usize,
}

impl Default for OptimizerConfig {
    /// Plain gradient ascent, lr 1e-5, weight decay 0.01, β 0.04, G = 8.
    fn default() -> Self {
        OptimizerConfig {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            epochs: 3,
            max_generation_length: 1024,
            std_epsilon: 1e-8,
            discount: 1.0,
            inner_epochs: 1,
            update_rule: UpdateRule::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sft_epochs: 1,
            sft_learning_rate: 1e-5,
            sft_batch_size: 16,
        }
    }
}

impl OptimizerConfig {
    /// The defaults with the adaptive update used for full-scale runs.
    pub fn full_scale_preset() -> Self {
        OptimizerConfig {
            update_rule: UpdateRule::Adam,
            ..Self::default()
        }
    }

    /// The defaults with learning rate 1e-6.
    pub fn low_lr_preset() -> Self {
        OptimizerConfig {
            learning_rate: 1e-6,
            sft_learning_rate: 1e-6,
            ..Self::default()
        }
    }

    /// Settings that train the desk-scale recurrent policy in minutes.
    pub fn toy_preset() -> Self {
        OptimizerConfig {
            learning_rate: 2e-3,
            weight_decay: 0.0,
            max_generation_length: 64,
            sft_learning_rate: 1e-2,
            ..Self::full_scale_preset()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(format!("clip_epsilon must be in (0,1), got {}", self.clip_epsilon));
        }
        if !(self.kl_beta >= 0.0) {
            return Err("kl_beta must be >= 0".into());
        }
        if !(self.std_epsilon > 0.0) {
            return Err("std_epsilon must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err("discount must be in [0,1]".into());
        }
        if self.group_size < 2 {
            return Err("group_size must be >= 2".into());
        }
        if self.inner_epochs == 0 || self.sft_batch_size == 0 {
            return Err("inner_epochs and sft_batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// One sampled response with its per-token log-probabilities under the
/// sampling policy and the frozen reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub response_tokens: Vec<TokenId>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<TokenId>,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    fn validate(&self) -> Result<(), GrpoError> {
        if self.rollouts.len() < 2 {
            return Err(GrpoError::GroupTooSmall(self.rollouts.len()));
        }
        for (index, r) in self.rollouts.iter().enumerate() {
            let n = r.response_tokens.len();
            if n == 0 || r.logp_old.len() != n || r.logp_ref.len() != n {
                return Err(GrpoError::MalformedRollout { index });
            }
        }
        Ok(())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
}

/// `A_i = (R_i − mean) / (population std + std_epsilon)`.
pub fn normalize_advantages(rewards: &[f64], std_epsilon: f64) -> Result<AdvantageVector, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + std_epsilon;
    Ok(AdvantageVector {
        values: rewards.iter().map(|r| (r - mean) / denom).collect(),
    })
}

/// k3 estimate of KL(π_θ ‖ π_ref) per token; nonnegative, zero at equality.
pub fn kl_per_token(logp_theta: &[f64], logp_ref: &[f64]) -> Vec<f64> {
    assert_eq!(logp_theta.len(), logp_ref.len(), "aligned log-probabilities");
    logp_theta.iter().zip(logp_ref).map(|(t, r)| k3(*t, *r)).collect()
}

fn k3(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp_m1() - d
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Objective value, exact gradient and diagnostics for one or more groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Mean k3 over all response tokens.
    pub mean_kl: f64,
    /// Fraction of tokens whose clipped branch was selected.
    pub clip_fraction: f64,
    pub n_tokens: usize,
}

/// Evaluates the group objective and its gradient with respect to the
/// current parameters, holding `logp_old`, `logp_ref` and the advantages fixed.
pub fn grpo_objective<P: Policy>(
    policy: &P,
    group: &RolloutGroup,
    advantages: &AdvantageVector,
    config: &OptimizerConfig,
) -> Result<ObjectiveEval, GrpoError> {
    let mut gradient = vec![0.0; policy.param_count()];
    let acc = accumulate_group(policy, group, advantages, config, 1.0, &mut gradient)?;
    Ok(ObjectiveEval {
        objective: acc.objective,
        gradient,
        mean_kl: acc.kl_sum / acc.n_tokens as f64,
        clip_fraction: acc.clipped as f64 / acc.n_tokens as f64,
        n_tokens: acc.n_tokens,
    })
}

#[derive(Default)]
struct GroupAccum {
    objective: f64,
    kl_sum: f64,
    clipped: usize,
    n_tokens: usize,
}

fn accumulate_group<P: Policy>(
    policy: &P,
    group: &RolloutGroup,
    advantages: &AdvantageVector,
    config: &OptimizerConfig,
    scale: f64,
    gradient: &mut [f64],
) -> Result<GroupAccum, GrpoError> {
    group.validate()?;
    if advantages.values.len() != group.rollouts.len() {
        return Err(GrpoError::Numerical("advantage count differs from group size".into()));
    }
    let g = group.rollouts.len() as f64;
    let eps = config.clip_epsilon;
    let beta = config.kl_beta;
    let mut acc = GroupAccum::default();
    for (rollout, &adv) in group.rollouts.iter().zip(&advantages.values) {
        let (logp, trace) = policy.forward(&group.prompt, &rollout.response_tokens)?;
        let weight = scale / (g * logp.len() as f64);
        let mut coeffs = Vec::with_capacity(logp.len());
        for t in 0..logp.len() {
            let ratio = (logp[t] - rollout.logp_old[t]).exp();
            if !ratio.is_finite() {
                return Err(GrpoError::Numerical(format!("non-finite ratio at token {t}")));
            }
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
            let unclipped_active = ratio * adv <= clipped * adv;
            let surrogate = if unclipped_active { ratio * adv } else { clipped * adv };
            let delta = rollout.logp_ref[t] - logp[t];
            let kl = delta.exp_m1() - delta;
            acc.objective += weight * (surrogate - beta * kl);
            acc.kl_sum += kl;
            if !unclipped_active {
                acc.clipped += 1;
            }
            let d_surrogate = if unclipped_active { adv * ratio } else { 0.0 };
            // d k3 / d logp_theta = 1 − exp(Δ)
            coeffs.push(weight * (d_surrogate + beta * delta.exp_m1()));
        }
        acc.n_tokens += logp.len();
        policy.backward(&trace, &coeffs, gradient);
    }
    if !acc.objective.is_finite() {
        return Err(GrpoError::Numerical("non-finite objective".into()));
    }
    Ok(acc)
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone)]
pub struct ParamUpdater {
    rule: UpdateRule,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ParamUpdater {
    pub fn new(config: &OptimizerConfig, n_params: usize) -> Self {
        ParamUpdater {
            rule: config.update_rule,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Moves `params` along `direction` (an ascent direction) and applies
    /// decoupled weight decay computed from the pre-update parameters.
    pub fn ascend(&mut self, params: &mut [f64], direction: &[f64], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), direction.len());
        self.t += 1;
        match self.rule {
            UpdateRule::Sgd => {
                for (p, g) in params.iter_mut().zip(direction) {
                    *p += lr * g - lr * weight_decay * *p;
                }
            }
            UpdateRule::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.t);
                let bc2 = 1.0 - self.beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = direction[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let step = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
                    params[i] += lr * step - lr * weight_decay * params[i];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// One optimization step over a batch of scored groups. Advantages are
/// computed here from the rollout rewards; the batch objective is the mean of
/// the group objectives. Diagnostics describe the first inner epoch.
pub fn grpo_step<P: Policy>(
    policy: &mut P,
    updater: &mut ParamUpdater,
    groups: &[RolloutGroup],
    config: &OptimizerConfig,
) -> Result<StepDiagnostics, GrpoError> {
    let advantages = groups
        .iter()
        .map(|g| normalize_advantages(&g.rewards(), config.std_epsilon))
        .collect::<Result<Vec<_>, _>>()?;
    let mut diag = StepDiagnostics::default();
    if groups.is_empty() {
        return Ok(diag);
    }
    let scale = 1.0 / groups.len() as f64;
    for epoch in 0..config.inner_epochs {
        let mut gradient = vec![0.0; policy.param_count()];
        let mut objective = 0.0;
        let (mut kl, mut clipped, mut tokens) = (0.0, 0usize, 0usize);
        for (group, adv) in groups.iter().zip(&advantages) {
            let acc = accumulate_group(policy, group, adv, config, scale, &mut gradient)?;
            objective += acc.objective;
            kl += acc.kl_sum;
            clipped += acc.clipped;
            tokens += acc.n_tokens;
        }
        if epoch == 0 {
            let n_rollouts: usize = groups.iter().map(|g| g.rollouts.len()).sum();
            diag = StepDiagnostics {
                objective,
                mean_reward: groups.iter().flat_map(|g| g.rewards()).sum::<f64>() / n_rollouts as f64,
                mean_kl: kl / tokens as f64,
                clip_fraction: clipped as f64 / tokens as f64,
                grad_norm: gradient.iter().map(|g| g * g).sum::<f64>().sqrt(),
            };
        }
        updater.ascend(policy.params_mut(), &gradient, config.learning_rate, config.weight_decay);
    }
    Ok(diag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean per-token NLL over all demonstrations after each epoch.
    pub epoch_nll: Vec<f64>,
    /// NLL after the last epoch; absent when there were no demonstrations.
    pub final_nll: Option<f64>,
}

/// Supervised warm-up: minimizes the mean per-token NLL of the targets
/// under teacher forcing, in shuffled minibatches, for `config.sft_epochs`.
pub fn sft_warmup<P: Policy>(
    policy: &mut P,
    updater: &mut ParamUpdater,
    demonstrations: &[(Vec<TokenId>, Vec<TokenId>)],
    config: &OptimizerConfig,
    seed: u64,
) -> Result<SftReport, GrpoError> {
    let mut report = SftReport {
        epoch_nll: Vec::new(),
        final_nll: None,
    };
    if demonstrations.is_empty() {
        return Ok(report);
    }
    for (prompt, target) in demonstrations {
        policy.vocab().check(prompt)?;
        policy.vocab().check(target)?;
    }
    let mut order: Vec<usize> = (0..demonstrations.len()).collect();
    for epoch in 0..config.sft_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.sft_batch_size) {
            let batch: Vec<_> = chunk.iter().map(|i| demonstrations[*i].clone()).collect();
            let (_, grad) = nll_objective(policy, &batch)?;
            let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
            updater.ascend(policy.params_mut(), &ascent, config.sft_learning_rate, config.weight_decay);
        }
        let nll = mean_nll(policy, demonstrations)?;
        if !nll.is_finite() {
            return Err(GrpoError::Numerical("non-finite NLL during warm-up".into()));
        }
        report.epoch_nll.push(nll);
    }
    report.final_nll = match report.epoch_nll.last() {
        Some(v) => Some(*v),
        None => Some(mean_nll(policy, demonstrations)?),
    };
    Ok(report)
}

/// Mean per-token NLL of the targets.
pub fn mean_nll<P: Policy>(policy: &P, data: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64, GrpoError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (prompt, target) in data {
        total -= policy.logprobs(prompt, target)?.iter().sum::<f64>();
        n += target.len();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `G_t = Σ_{k=t+1..T} γ^{k−t} r_k` for 1-based rewards `r_1..r_T`; the
/// first future reward is already discounted once.
pub fn discounted_return(rewards: &[f64], gamma: f64, t: usize) -> f64 {
    let mut acc = 0.0;
    let mut discount = 1.0;
    for r in rewards.iter().skip(t) {
        discount *= gamma;
        acc += discount * r;
    }
    acc
}
