//! Finite-difference oracles shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tempered_core::grpo::{
    compute_advantages, grpo_grad, surrogate_objective, GrpoConfig, ReferencePolicy, RolloutGroup,
};
use tempered_core::rng;
use tempered_core::toy_lm::{Gradient, PolicyParams, SampleOptions, TokenId};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Reserved delimiters plus four symbols.
pub const VOCAB: usize = 10;
pub const WINDOW: usize = 2;

pub fn random_params(r: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::zeros(VOCAB, WINDOW);
    for i in 0..p.num_parameters() {
        *p.flat_mut(i) = r.random_range(-scale..scale);
    }
    p
}

pub fn random_tokens(r: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<TokenId> {
    let n = r.random_range(min..=max);
    (0..n).map(|_| r.random_range(0..VOCAB) as TokenId).collect()
}

/// Largest coordinate error relative to `max(|analytic|, |numeric|, 1)`,
/// and the error of the whole vector relative to its norm.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_coord_rel: f64,
    pub vector_rel: f64,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.max_coord_rel < REL_TOL && self.vector_rel < REL_TOL
    }
}

pub fn compare(
    params: &PolicyParams,
    analytic: &Gradient,
    mut f: impl FnMut(&PolicyParams) -> f64,
) -> FdReport {
    let mut p = params.clone();
    let mut diff2 = 0.0;
    let mut norm2 = 0.0;
    let mut max_coord_rel: f64 = 0.0;
    for i in 0..p.num_parameters() {
        let x = *p.flat_mut(i);
        *p.flat_mut(i) = x + H;
        let up = f(&p);
        *p.flat_mut(i) = x - H;
        let down = f(&p);
        *p.flat_mut(i) = x;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic.get(i);
        let d = (a - numeric).abs();
        max_coord_rel = max_coord_rel.max(d / a.abs().max(numeric.abs()).max(1.0));
        diff2 += d * d;
        norm2 += a.abs().max(numeric.abs()).powi(2);
    }
    FdReport {
        max_coord_rel,
        vector_rel: diff2.sqrt() / norm2.sqrt().max(1e-12),
    }
}

/// `grad_log_prob` against central differences of `log_prob`.
pub fn check_grad_log_prob(seed: u64) -> FdReport {
    let mut r = rng::stream(seed, &[rng::label_hash("fd-logprob")]);
    let params = random_params(&mut r, 1.0);
    let prompt = random_tokens(&mut r, 1, 4);
    let response = random_tokens(&mut r, 1, 5);
    let g = params.grad_log_prob(&prompt, &response).unwrap();
    compare(&params, &g, |p| p.log_prob(&prompt, &response).unwrap().total_log_prob)
}

pub fn fd_grpo_config(beta: f64) -> GrpoConfig {
    GrpoConfig {
        group_size: 4,
        clip_epsilon: 0.2,
        kl_coefficient: beta,
        temperature: 1.0,
        learning_rate: 0.1,
        epochs: 1,
        scenarios_per_step: 2,
        updates_per_rollout: 1,
        max_prompt_len: 8,
        max_completion_len: 5,
        max_grad_norm: 1.0,
        warmup_ratio: 0.0,
        weight_decay: 0.0,
        reference_policy: ReferencePolicy::SftCheckpoint,
        seed: 0,
    }
}

/// Rollout groups sampled from `pi_old` with random rewards.
pub fn random_groups(r: &mut ChaCha8Rng, pi_old: &PolicyParams, n_groups: usize, g: usize) -> Vec<RolloutGroup> {
    let opts = SampleOptions {
        temperature: 1.0,
        max_len: 4,
        eos: Some(4),
    };
    (0..n_groups)
        .map(|k| {
            let prompt = random_tokens(r, 1, 4);
            let candidates: Vec<_> = (0..g)
                .map(|_| pi_old.sample_sequence(&prompt, &opts, r.random()).unwrap())
                .collect();
            let rewards: Vec<f64> = (0..g).map(|_| r.random_range(0..=6) as f64 * 0.5).collect();
            RolloutGroup {
                scenario_id: format!("g{k}"),
                prompt,
                candidates,
                rewards: Vec::new(),
                advantages: compute_advantages(&rewards).unwrap(),
            }
        })
        .collect()
}

/// `grpo_grad` against central differences of the surrogate. Returns `None`
/// when a ratio lies within `margin` of a clip boundary, where the surrogate
/// is not differentiable.
pub fn check_grpo_grad(seed: u64) -> Option<FdReport> {
    let mut r = rng::stream(seed, &[rng::label_hash("fd-grpo")]);
    let pi_old = random_params(&mut r, 0.5);
    let mut pi_theta = pi_old.clone();
    for i in 0..pi_theta.num_parameters() {
        *pi_theta.flat_mut(i) += r.random_range(-0.05..0.05);
    }
    let pi_ref = random_params(&mut r, 0.5);
    let beta = [0.0, 0.005, 0.1, 1.0][seed as usize % 4];
    let cfg = fd_grpo_config(beta);
    let groups = random_groups(&mut r, &pi_old, 2, 4);
    let margin = 1e-3;
    for c in groups.iter().flat_map(|g| &g.candidates) {
        let ratio = (pi_theta.log_prob(&c.prompt_tokens, &c.response_tokens).unwrap().total_log_prob
            - c.total_log_prob)
            .exp();
        if (ratio - 1.0 - cfg.clip_epsilon).abs() < margin || (ratio - 1.0 + cfg.clip_epsilon).abs() < margin {
            return None;
        }
    }
    let (g, _) = grpo_grad(&pi_theta, &pi_ref, &groups, &cfg).unwrap();
    Some(compare(&pi_theta, &g, |p| surrogate_objective(p, &pi_ref, &groups, &cfg).unwrap()))
}
