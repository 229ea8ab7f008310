//! Supervised fine-tuning: gradient ascent on the per-token log-likelihood of
//! gold structured responses, with cosine learning-rate decay and decoupled
//! weight decay.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scenario::{encode_scenario, SftExample};
use crate::toy_lm::{Gradient, PolicyParams, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Examples per optimizer step.
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Log a row every this many steps (the last step is always logged).
    pub logging_steps: usize,
    /// Emit a checkpoint every this many steps; 0 disables.
    pub save_steps: usize,
    pub seed: u64,
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("sft learning_rate {} invalid", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("sft epochs and batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("sft weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// A gold example as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

pub fn encode_examples(vocab: &Vocab, examples: &[SftExample]) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| {
            Ok(EncodedExample {
                prompt: encode_scenario(vocab, &e.scenario)?,
                target: vocab.encode(&e.target_response)?,
            })
        })
        .collect()
}

/// Mean over examples of the per-token negative log-likelihood of the target.
pub fn cross_entropy_loss(params: &PolicyParams, batch: &[EncodedExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("cross-entropy over an empty batch".into()));
    }
    let per_example: Vec<f64> = batch
        .par_iter()
        .map(|e| {
            let s = params.log_prob(&e.prompt, &e.target)?;
            Ok(-s.total_log_prob / e.target.len().max(1) as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per_example.iter().sum::<f64>() / batch.len() as f64)
}

/// Gradient of the mean per-token log-likelihood (the ascent direction).
pub fn log_likelihood_gradient(params: &PolicyParams, batch: &[EncodedExample]) -> Result<Gradient> {
    if batch.is_empty() {
        return Err(Error::Input("gradient over an empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Gradient> = batch
        .par_iter()
        .map(|e| {
            let mut g = params.zero_gradient();
            params.accumulate_grad_log_prob(&e.prompt, &e.target, 1.0 / e.target.len().max(1) as f64, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    // fixed-order reduction keeps results independent of the thread count
    let mut total = params.zero_gradient();
    for g in &parts {
        total.add_scaled(g, scale);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftStepMetrics {
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
}

/// One update: `theta <- theta * (1 - lr * wd) + lr * grad`.
pub fn sft_step(
    params: &mut PolicyParams,
    batch: &[EncodedExample],
    learning_rate: f64,
    weight_decay: f64,
) -> Result<SftStepMetrics> {
    let loss_before = cross_entropy_loss(params, batch)?;
    let grad = log_likelihood_gradient(params, batch)?;
    grad.ensure_finite("sft step")?;
    let grad_norm = grad.norm();
    if learning_rate != 0.0 {
        if weight_decay != 0.0 {
            params.scale(1.0 - learning_rate * weight_decay);
        }
        params.add_scaled(&grad, learning_rate);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite {
            what: "parameter",
            during: "sft step".into(),
        });
    }
    let loss_after = cross_entropy_loss(params, batch)?;
    Ok(SftStepMetrics {
        loss_before,
        loss_after,
        grad_norm,
    })
}

/// Cosine decay from `base` at step 0 towards 0 at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftLogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Runs `epochs` passes of shuffled mini-batches. `on_save` is called with the
/// step count and parameters every `save_steps` steps.
pub fn train_sft(
    params: &PolicyParams,
    dataset: &[EncodedExample],
    config: &SftConfig,
    mut on_save: impl FnMut(usize, &PolicyParams) -> Result<()>,
) -> Result<(PolicyParams, Vec<SftLogRow>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("SFT dataset is empty".into()));
    }
    let mut params = params.clone();
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, &[rng::label_hash("sft-epoch"), epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EncodedExample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let lr = cosine_lr(config.learning_rate, step, total_steps);
            let m = sft_step(&mut params, &batch, lr, config.weight_decay)?;
            step += 1;
            if step % config.logging_steps.max(1) == 0 || step == total_steps {
                log.push(SftLogRow {
                    step,
                    epoch,
                    lr,
                    loss: m.loss_before,
                    grad_norm: m.grad_norm,
                });
            }
            if config.save_steps > 0 && step % config.save_steps == 0 {
                on_save(step, &params)?;
            }
        }
    }
    Ok((params, log))
}
