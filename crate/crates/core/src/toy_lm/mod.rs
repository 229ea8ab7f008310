//! A small autoregressive categorical policy.
//!
//! Next-token logits are an affine function of hand-built context features
//! (normalized prompt bag plus a one-hot recency window), so log-probabilities,
//! their parameter gradients and per-step KL divergences are all exact and
//! cheap. The same [`PolicyParams`] type serves as the trained policy, the
//! rollout snapshot and the frozen reference.

mod checkpoint;
mod features;
mod params;
pub mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use features::ContextFeatures;
pub use params::{Gradient, PolicyParams, DEFAULT_WINDOW};
pub use vocab::{TokenId, TokenKind, Vocab};

use crate::error::{Error, Result};
use crate::rng;
use features::{check_ids, PathFeatures};

/// Probabilities are clamped here before taking logs.
pub const MIN_PROB: f64 = 1e-12;

/// A response together with its per-step natural-log probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub prompt_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
    pub step_log_probs: Vec<f64>,
    pub total_log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// `0.0` selects greedy decoding.
    pub temperature: f64,
    pub max_len: usize,
    /// Sampling stops after emitting this token.
    pub eos: Option<TokenId>,
}

impl SampleOptions {
    pub fn greedy(max_len: usize) -> Self {
        SampleOptions {
            temperature: 0.0,
            max_len,
            eos: Some(vocab::EOS),
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| (z - m) - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn clamped_log_probs(logits: &[f64]) -> Vec<f64> {
    let floor = MIN_PROB.ln();
    log_softmax(logits).into_iter().map(|l| l.max(floor)).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl PolicyParams {
    pub fn logits(&self, ctx: &ContextFeatures) -> Result<Vec<f64>> {
        if ctx.prompt_summary.len() != self.vocab_size() || ctx.recency_window.len() != self.window()
        {
            return Err(Error::Config(format!(
                "context has dimension {} (window {}), policy expects {} (window {})",
                ctx.dim(),
                ctx.recency_window.len(),
                self.context_dim(),
                self.window()
            )));
        }
        check_ids(&ctx.recency_window.iter().flatten().copied().collect::<Vec<_>>(), self.vocab_size())?;
        let mut out = Vec::new();
        self.sparse_logits(&ctx.sparse(), &mut out);
        Ok(out)
    }

    fn sparse_logits(&self, feats: &[(usize, f64)], out: &mut Vec<f64>) {
        let v = self.vocab_size();
        out.clear();
        out.extend_from_slice(self.bias());
        let w = self.weights();
        for &(j, x) in feats {
            let row = &w[j * v..(j + 1) * v];
            for (o, r) in out.iter_mut().zip(row) {
                *o += x * r;
            }
        }
    }

    /// Runs `visit(step, features, logits)` along the path `prompt ++ response`.
    fn walk_path<F>(&self, prompt: &[TokenId], response: &[TokenId], mut visit: F) -> Result<()>
    where
        F: FnMut(usize, &[(usize, f64)], &[f64]),
    {
        check_ids(prompt, self.vocab_size())?;
        check_ids(response, self.vocab_size())?;
        let path = PathFeatures::new(prompt, self.vocab_size(), self.window());
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        for pos in 0..response.len() {
            path.at(response, pos, &mut feats);
            self.sparse_logits(&feats, &mut logits);
            visit(pos, &feats, &logits);
        }
        Ok(())
    }

    pub fn log_prob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<SequenceSample> {
        let mut steps = Vec::with_capacity(response.len());
        self.walk_path(prompt, response, |pos, _, logits| {
            steps.push(clamped_log_probs(logits)[response[pos] as usize]);
        })?;
        Ok(SequenceSample {
            prompt_tokens: prompt.to_vec(),
            response_tokens: response.to_vec(),
            total_log_prob: steps.iter().sum(),
            step_log_probs: steps,
        })
    }

    /// Gradient of `log pi(response | prompt)` with respect to every parameter.
    pub fn grad_log_prob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Gradient> {
        let mut g = self.zero_gradient();
        self.accumulate_grad_log_prob(prompt, response, 1.0, &mut g)?;
        Ok(g)
    }

    /// `g += scale * grad log pi(response | prompt)`; returns the log-probability.
    pub(crate) fn accumulate_grad_log_prob(
        &self,
        prompt: &[TokenId],
        response: &[TokenId],
        scale: f64,
        g: &mut Gradient,
    ) -> Result<f64> {
        let v = self.vocab_size();
        let mut total = 0.0;
        let mut delta = vec![0.0; v];
        self.walk_path(prompt, response, |pos, feats, logits| {
            let target = response[pos] as usize;
            let lp = clamped_log_probs(logits);
            total += lp[target];
            // d log p(target) / d logits = onehot(target) - softmax
            for (d, l) in delta.iter_mut().zip(&lp) {
                *d = -l.exp();
            }
            delta[target] += 1.0;
            add_outer(g, feats, &delta, scale, v);
        })?;
        Ok(total)
    }

    /// Autoregressive ancestral sampling. The recorded step log-probs are those
    /// of the untempered policy, so they agree with [`PolicyParams::log_prob`].
    pub fn sample_sequence(
        &self,
        prompt: &[TokenId],
        opts: &SampleOptions,
        seed: u64,
    ) -> Result<SequenceSample> {
        if !(opts.temperature >= 0.0) || opts.max_len == 0 {
            return Err(Error::Config(format!(
                "invalid sampling options: temperature {} max_len {}",
                opts.temperature, opts.max_len
            )));
        }
        check_ids(prompt, self.vocab_size())?;
        let mut r = rng::stream(seed, &[rng::label_hash("sample")]);
        let path = PathFeatures::new(prompt, self.vocab_size(), self.window());
        let mut response = Vec::with_capacity(opts.max_len);
        let mut steps = Vec::with_capacity(opts.max_len);
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        while response.len() < opts.max_len {
            path.at(&response, response.len(), &mut feats);
            self.sparse_logits(&feats, &mut logits);
            let next = if opts.temperature == 0.0 {
                argmax(&logits)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|z| z / opts.temperature).collect();
                draw(&softmax(&scaled), r.random::<f64>())
            };
            steps.push(clamped_log_probs(&logits)[next]);
            response.push(next as TokenId);
            if opts.eos == Some(next as TokenId) {
                break;
            }
        }
        Ok(SequenceSample {
            prompt_tokens: prompt.to_vec(),
            response_tokens: response,
            total_log_prob: steps.iter().sum(),
            step_log_probs: steps,
        })
    }

    /// Exact `KL(self || q)` summed over the contexts visited by `response`.
    pub fn kl_divergence(
        &self,
        q: &PolicyParams,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<f64> {
        self.kl_with_grad(q, prompt, response, 0.0, None)
    }

    /// Returns `KL(self || q)` along the path and, if `g` is given, adds
    /// `scale * grad_self KL` into it.
    pub(crate) fn kl_with_grad(
        &self,
        q: &PolicyParams,
        prompt: &[TokenId],
        response: &[TokenId],
        scale: f64,
        mut g: Option<&mut Gradient>,
    ) -> Result<f64> {
        if q.vocab_size() != self.vocab_size() || q.window() != self.window() {
            return Err(Error::Config(
                "KL requires policies over the same vocabulary and context layout".into(),
            ));
        }
        let v = self.vocab_size();
        let mut q_logits = Vec::new();
        let mut total = 0.0;
        let mut delta = vec![0.0; v];
        self.walk_path(prompt, response, |_, feats, logits| {
            q.sparse_logits(feats, &mut q_logits);
            let lp = clamped_log_probs(logits);
            let lq = clamped_log_probs(&q_logits);
            let step: f64 = lp
                .iter()
                .zip(&lq)
                .map(|(a, b)| if a == b { 0.0 } else { a.exp() * (a - b) })
                .sum();
            total += step.max(0.0);
            if let Some(g) = g.as_deref_mut() {
                // d KL / d z_u = p_u (log p_u - log q_u - KL)
                for ((d, a), b) in delta.iter_mut().zip(&lp).zip(&lq) {
                    *d = a.exp() * (a - b - step);
                }
                add_outer(g, feats, &delta, scale, v);
            }
        })?;
        Ok(total)
    }
}

fn add_outer(g: &mut Gradient, feats: &[(usize, f64)], delta: &[f64], scale: f64, v: usize) {
    for (b, d) in g.bias.iter_mut().zip(delta) {
        *b += scale * d;
    }
    for &(j, x) in feats {
        let row = &mut g.weights[j * v..(j + 1) * v];
        for (w, d) in row.iter_mut().zip(delta) {
            *w += scale * x * d;
        }
    }
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left `acc` just below 1; take the last token with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
