use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_WINDOW: usize = 3;

/// Parameters of the linear-softmax next-token policy.
///
/// `weights` is stored feature-major: the logit contribution of feature `j`
/// to token `v` lives at `weights[j * vocab_size + v]`. Context features are
/// sparse, so this layout lets a forward pass touch only the active rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    vocab_size: usize,
    window: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, window: usize) -> Self {
        assert!(vocab_size >= 1, "vocabulary must be non-empty");
        let context_dim = (window + 1) * vocab_size;
        PolicyParams {
            vocab_size,
            window,
            weights: vec![0.0; context_dim * vocab_size],
            bias: vec![0.0; vocab_size],
        }
    }

    /// Near-uniform initial policy: weights ~ U(-0.01, 0.01), zero bias.
    pub fn init(vocab_size: usize, window: usize, seed: u64) -> Self {
        let mut p = Self::zeros(vocab_size, window);
        let mut r = rng::stream(seed, &[rng::label_hash("policy-init")]);
        for w in &mut p.weights {
            *w = r.random_range(-0.01..0.01);
        }
        p
    }

    pub(crate) fn from_parts(
        vocab_size: usize,
        window: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let context_dim = (window + 1) * vocab_size;
        if vocab_size == 0 || weights.len() != context_dim * vocab_size || bias.len() != vocab_size {
            return Err(Error::Config(format!(
                "parameter shapes do not match vocab_size={vocab_size}, window={window}"
            )));
        }
        Ok(PolicyParams {
            vocab_size,
            window,
            weights,
            bias,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of recent tokens in the recency window.
    pub fn window(&self) -> usize {
        self.window
    }

    /// Prompt summary block plus one one-hot block per window slot.
    pub fn context_dim(&self) -> usize {
        (self.window + 1) * self.vocab_size
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn weight(&self, feature: usize, token: usize) -> f64 {
        self.weights[feature * self.vocab_size + token]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// `self += scale * g`.
    pub fn add_scaled(&mut self, g: &Gradient, scale: f64) {
        debug_assert_eq!(g.weights.len(), self.weights.len());
        for (w, d) in self.weights.iter_mut().zip(&g.weights) {
            *w += scale * d;
        }
        for (b, d) in self.bias.iter_mut().zip(&g.bias) {
            *b += scale * d;
        }
    }

    /// Multiplies every parameter by `factor` (decoupled weight decay).
    pub fn scale(&mut self, factor: f64) {
        for w in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            *w *= factor;
        }
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(&self.bias).copied()
    }

    /// Mutable access by flat index (weights first, then bias).
    pub fn flat_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.weights.len();
        if i < n {
            &mut self.weights[i]
        } else {
            &mut self.bias[i - n]
        }
    }
}

/// A vector in parameter space, laid out like [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.flat().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(&self.bias).copied()
    }

    pub fn get(&self, i: usize) -> f64 {
        let n = self.weights.len();
        if i < n {
            self.weights[i]
        } else {
            self.bias[i - n]
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.flat().all(f64::is_finite)
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            *x *= factor;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }

    /// Rescales so the L2 norm is at most `max_norm`; returns the norm after clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
            self.norm()
        } else {
            n
        }
    }

    pub(crate) fn ensure_finite(&self, during: impl Into<String>) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: "gradient",
                during: during.into(),
            })
        }
    }
}
