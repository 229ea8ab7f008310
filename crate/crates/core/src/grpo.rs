//! Group Relative Policy Optimization.
//!
//! For each scenario, `G` candidates are sampled from a snapshot policy
//! `pi_old` and scored with the composite reward. Rewards are standardized
//! within the group,
//!
//! ```text
//! A_i = (r_i - mean(r)) / std(r)        (population std; all-equal group -> 0)
//! ```
//!
//! and the policy ascends the clipped, KL-regularized surrogate
//!
//! ```text
//! J = mean_groups [ 1/G sum_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i)
//!                   - beta * 1/G sum_i KL_path(pi_theta || pi_ref; y_i) ]
//! ```
//!
//! with the sequence-level ratio `rho_i = pi_theta(y_i|s) / pi_old(y_i|s)`.
//! The KL term is exact: per-step categorical KL summed along each
//! candidate's own context path.

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{RewardBreakdown, RewardModel};
use crate::rng;
use crate::scenario::{encode_scenario, Scenario};
use crate::toy_lm::{vocab, Gradient, PolicyParams, SampleOptions, SequenceSample, TokenId, Vocab};

const MAX_LOG_RATIO: f64 = 50.0;

/// Which policy anchors the KL penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// The SFT checkpoint, frozen for the whole stage.
    SftCheckpoint,
    /// Re-snapshotted from the current policy at the start of every epoch.
    RollingSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Scenarios rolled out per outer iteration.
    pub scenarios_per_step: usize,
    /// Optimizer steps taken on each batch of rollouts before `pi_old` is refreshed.
    pub updates_per_rollout: usize,
    pub max_prompt_len: usize,
    pub max_completion_len: usize,
    pub max_grad_norm: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub reference_policy: ReferencePolicy,
    pub seed: u64,
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return fail(format!("group_size {} < 2: group std is undefined", self.group_size));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail(format!("clip_epsilon {} outside (0, 1)", self.clip_epsilon));
        }
        if !(self.kl_coefficient >= 0.0) {
            return fail(format!("kl_coefficient {} negative", self.kl_coefficient));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.learning_rate >= 0.0) || !(self.max_grad_norm > 0.0) {
            return fail("learning_rate must be >= 0 and max_grad_norm > 0".into());
        }
        if self.epochs == 0 || self.scenarios_per_step == 0 || self.updates_per_rollout == 0 {
            return fail("epochs, scenarios_per_step and updates_per_rollout must be >= 1".into());
        }
        if self.max_completion_len == 0 || self.max_prompt_len == 0 {
            return fail("max prompt/completion lengths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return fail(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        Ok(())
    }
}

/// A scenario with its encoded prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RlPrompt {
    pub scenario: Scenario,
    pub prompt: Vec<TokenId>,
}

pub fn encode_prompts(vocab: &Vocab, scenarios: &[Scenario], max_prompt_len: usize) -> Result<Vec<RlPrompt>> {
    scenarios
        .iter()
        .map(|s| {
            let mut prompt = encode_scenario(vocab, s)?;
            if prompt.len() > max_prompt_len {
                prompt.drain(..prompt.len() - max_prompt_len);
            }
            Ok(RlPrompt {
                scenario: s.clone(),
                prompt,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub scenario_id: String,
    pub prompt: Vec<TokenId>,
    /// Sampled from `pi_old`; each `total_log_prob` is the old log-probability.
    pub candidates: Vec<SequenceSample>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn old_log_probs(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.total_log_prob).collect()
    }

    pub fn reward_totals(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total).collect()
    }
}

/// Samples `G` candidates from `pi_old`. Candidate `i` of scenario `s` at
/// iteration `k` draws from its own stream seeded by `(seed, k, s.id, i)`.
/// Advantages are left empty.
pub fn rollout_group(
    pi_old: &PolicyParams,
    prompt: &RlPrompt,
    rewards: &RewardModel<'_>,
    config: &GrpoConfig,
    iteration: u64,
) -> Result<RolloutGroup> {
    let opts = SampleOptions {
        temperature: config.temperature,
        max_len: config.max_completion_len,
        eos: Some(vocab::EOS),
    };
    let sid = rng::label_hash(&prompt.scenario.id);
    let candidates = (0..config.group_size)
        .map(|i| {
            let seed = rng::derive_seed(config.seed, &[iteration, sid, i as u64]);
            pi_old.sample_sequence(&prompt.prompt, &opts, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = candidates
        .iter()
        .map(|c| rewards.composite(&prompt.scenario, &c.response_tokens))
        .collect();
    Ok(RolloutGroup {
        scenario_id: prompt.scenario.id.clone(),
        prompt: prompt.prompt.clone(),
        candidates,
        rewards: scores,
        advantages: Vec::new(),
    })
}

/// Group-relative advantages with population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "advantages need a group of at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if rewards.iter().all(|&r| r == rewards[0]) || std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `pi_theta(y) / pi_old(y)` from the candidate's recorded old log-probability.
pub fn importance_ratio(pi_theta: &PolicyParams, candidate: &SequenceSample) -> Result<f64> {
    let new = pi_theta.log_prob(&candidate.prompt_tokens, &candidate.response_tokens)?;
    Ok(ratio_from_logs(new.total_log_prob, candidate.total_log_prob))
}

fn ratio_from_logs(new: f64, old: f64) -> f64 {
    let d = new - old;
    if !(d.abs() <= MAX_LOG_RATIO) {
        warn!("log importance ratio {d} clamped to ±{MAX_LOG_RATIO}");
        return d.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    }
    d.exp()
}

pub fn clip(x: f64, eps: f64) -> f64 {
    x.clamp(1.0 - eps, 1.0 + eps)
}

/// `min(rho * A, clip(rho) * A)` and whether the unclipped branch is the one
/// selected (and therefore carries gradient).
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = clip(ratio, eps) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SurrogateStats {
    pub objective: f64,
    pub mean_ratio: f64,
    /// Mean path KL to the reference policy per candidate.
    pub kl: f64,
    pub clip_fraction: f64,
}

fn surrogate_impl(
    pi_theta: &PolicyParams,
    pi_ref: &PolicyParams,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
    with_grad: bool,
) -> Result<(SurrogateStats, Option<Gradient>)> {
    if groups.is_empty() {
        return Err(Error::Input("surrogate over an empty batch".into()));
    }
    let eps = config.clip_epsilon;
    let beta = config.kl_coefficient;
    let n_groups = groups.len() as f64;

    struct Part {
        objective: f64,
        ratio_sum: f64,
        kl_sum: f64,
        clipped: usize,
        count: usize,
        grad: Option<Gradient>,
    }

    let parts: Vec<Part> = groups
        .par_iter()
        .map(|group| {
            if group.advantages.len() != group.candidates.len() {
                return Err(Error::Input(format!(
                    "group {} has no advantages; call compute_advantages first",
                    group.scenario_id
                )));
            }
            let g_size = group.candidates.len() as f64;
            let w = 1.0 / (g_size * n_groups);
            let mut grad = with_grad.then(|| pi_theta.zero_gradient());
            let mut part = Part {
                objective: 0.0,
                ratio_sum: 0.0,
                kl_sum: 0.0,
                clipped: 0,
                count: group.candidates.len(),
                grad: None,
            };
            for (cand, &adv) in group.candidates.iter().zip(&group.advantages) {
                let prompt = &cand.prompt_tokens;
                let resp = &cand.response_tokens;
                let new_lp = pi_theta.log_prob(prompt, resp)?.total_log_prob;
                let ratio = ratio_from_logs(new_lp, cand.total_log_prob);
                let (term, live) = clipped_term(ratio, adv, eps);
                if !live {
                    part.clipped += 1;
                }
                let kl = pi_theta.kl_with_grad(
                    pi_ref,
                    prompt,
                    resp,
                    -beta * w,
                    grad.as_mut().filter(|_| beta != 0.0),
                )?;
                if let Some(g) = grad.as_mut() {
                    if live && adv != 0.0 {
                        // d(rho A)/d theta = A rho grad log pi_theta(y)
                        pi_theta.accumulate_grad_log_prob(prompt, resp, w * adv * ratio, g)?;
                    }
                }
                part.objective += w * (term - beta * kl);
                part.ratio_sum += ratio;
                part.kl_sum += kl;
            }
            part.grad = grad;
            Ok(part)
        })
        .collect::<Result<_>>()?;

    let mut stats = SurrogateStats::default();
    let mut count = 0usize;
    let mut clipped = 0usize;
    let mut grad = with_grad.then(|| pi_theta.zero_gradient());
    for p in &parts {
        stats.objective += p.objective;
        stats.mean_ratio += p.ratio_sum;
        stats.kl += p.kl_sum;
        count += p.count;
        clipped += p.clipped;
        if let (Some(total), Some(g)) = (grad.as_mut(), p.grad.as_ref()) {
            total.add_scaled(g, 1.0);
        }
    }
    stats.mean_ratio /= count as f64;
    stats.kl /= count as f64;
    stats.clip_fraction = clipped as f64 / count as f64;
    if let Some(g) = &grad {
        g.ensure_finite("GRPO gradient")?;
    }
    Ok((stats, grad))
}

pub fn surrogate_objective(
    pi_theta: &PolicyParams,
    pi_ref: &PolicyParams,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
) -> Result<f64> {
    Ok(surrogate_impl(pi_theta, pi_ref, groups, config, false)?.0.objective)
}

/// Analytic gradient of [`surrogate_objective`] with respect to `pi_theta`.
/// Candidates whose clipped branch is selected contribute no policy gradient.
pub fn grpo_grad(
    pi_theta: &PolicyParams,
    pi_ref: &PolicyParams,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
) -> Result<(Gradient, SurrogateStats)> {
    let (stats, grad) = surrogate_impl(pi_theta, pi_ref, groups, config, true)?;
    Ok((grad.expect("requested"), stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub mean_ratio: f64,
    pub kl: f64,
    pub objective: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub clip_fraction: f64,
}

/// Rolls out one group per prompt from `pi_old` and fills in advantages.
pub fn rollout_batch(
    pi_old: &PolicyParams,
    prompts: &[RlPrompt],
    rewards: &RewardModel<'_>,
    config: &GrpoConfig,
    iteration: u64,
) -> Result<Vec<RolloutGroup>> {
    prompts
        .par_iter()
        .map(|p| {
            let mut g = rollout_group(pi_old, p, rewards, config, iteration)?;
            g.advantages = compute_advantages(&g.reward_totals())?;
            Ok(g)
        })
        .collect()
}

/// One ascent step on pre-computed rollouts with global grad-norm clipping.
pub fn grpo_update(
    pi_theta: &mut PolicyParams,
    pi_ref: &PolicyParams,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
    learning_rate: f64,
) -> Result<GrpoStepMetrics> {
    let (mut grad, stats) = grpo_grad(pi_theta, pi_ref, groups, config)?;
    let grad_norm = grad.norm();
    let clipped_grad_norm = grad.clip_norm(config.max_grad_norm);
    if learning_rate != 0.0 {
        if config.weight_decay != 0.0 {
            pi_theta.scale(1.0 - learning_rate * config.weight_decay);
        }
        pi_theta.add_scaled(&grad, learning_rate);
    }
    if !pi_theta.is_finite() {
        return Err(Error::NonFinite {
            what: "parameter",
            during: "GRPO update".into(),
        });
    }
    let n: usize = groups.iter().map(|g| g.candidates.len()).sum();
    let mean_reward = groups.iter().flat_map(|g| &g.rewards).map(|r| r.total).sum::<f64>() / n as f64;
    let mean_abs_advantage = groups.iter().flat_map(|g| &g.advantages).map(|a| a.abs()).sum::<f64>() / n as f64;
    Ok(GrpoStepMetrics {
        step: 0,
        epoch: 0,
        lr: learning_rate,
        mean_reward,
        mean_abs_advantage,
        mean_ratio: stats.mean_ratio,
        kl: stats.kl,
        objective: stats.objective,
        grad_norm,
        clipped_grad_norm,
        clip_fraction: stats.clip_fraction,
    })
}

/// Rollout from `pi_old` followed by one update of `pi_theta`.
pub fn grpo_step(
    pi_theta: &mut PolicyParams,
    pi_old: &PolicyParams,
    pi_ref: &PolicyParams,
    prompts: &[RlPrompt],
    rewards: &RewardModel<'_>,
    config: &GrpoConfig,
    iteration: u64,
) -> Result<GrpoStepMetrics> {
    config.validate()?;
    let groups = rollout_batch(pi_old, prompts, rewards, config, iteration)?;
    grpo_update(pi_theta, pi_ref, &groups, config, config.learning_rate)
}

/// Linear warmup over the first `warmup_ratio` of steps, cosine decay after.
pub fn warmup_cosine_lr(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    base * 0.5 * (1.0 + (std::f64::consts::PI * (step - warmup) as f64 / span as f64).cos())
}

/// Full RL stage starting from the SFT policy. Each outer iteration snapshots
/// `pi_old`, rolls out one batch of scenarios and takes
/// `updates_per_rollout` ascent steps on it.
pub fn train_grpo(
    pi_sft: &PolicyParams,
    prompts: &[RlPrompt],
    rewards: &RewardModel<'_>,
    config: &GrpoConfig,
    mut on_step: impl FnMut(&GrpoStepMetrics, &PolicyParams) -> Result<()>,
) -> Result<(PolicyParams, Vec<GrpoStepMetrics>)> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Input("GRPO needs at least one scenario".into()));
    }
    let mut theta = pi_sft.clone();
    let mut pi_ref = pi_sft.clone();
    let batches_per_epoch = prompts.len().div_ceil(config.scenarios_per_step);
    let total_steps = batches_per_epoch * config.epochs * config.updates_per_rollout;
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let mut iteration = 0u64;
    for epoch in 0..config.epochs {
        if config.reference_policy == ReferencePolicy::RollingSnapshot {
            pi_ref = theta.clone();
        }
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, &[rng::label_hash("grpo-epoch"), epoch as u64]));
        for chunk in order.chunks(config.scenarios_per_step) {
            let batch: Vec<RlPrompt> = chunk.iter().map(|&i| prompts[i].clone()).collect();
            let pi_old = theta.clone();
            let groups = rollout_batch(&pi_old, &batch, rewards, config, iteration)?;
            for _ in 0..config.updates_per_rollout {
                let lr = warmup_cosine_lr(config.learning_rate, step, total_steps, config.warmup_ratio);
                let mut m = grpo_update(&mut theta, &pi_ref, &groups, config, lr)?;
                step += 1;
                m.step = step;
                m.epoch = epoch;
                on_step(&m, &theta)?;
                log.push(m);
            }
            iteration += 1;
        }
    }
    Ok((theta, log))
}
