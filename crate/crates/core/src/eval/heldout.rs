use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::RewardModel;
use crate::rng;
use crate::scenario::{encode_scenario, Scenario};
use crate::toy_lm::{vocab, PolicyParams, SampleOptions, Vocab};

/// Mean composite reward and KL to a reference over temperature-1 samples on
/// scenarios the policy was not trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutStats {
    pub mean_reward: f64,
    pub mean_kl_to_ref: f64,
    pub n_samples: usize,
}

/// Sample `k` of scenario `s` uses the stream `(seed, s.id, k)`, so two
/// policies evaluated with the same seed see common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn held_out_stats(
    params: &PolicyParams,
    reference: &PolicyParams,
    rewards: &RewardModel<'_>,
    vocab: &Vocab,
    scenarios: &[Scenario],
    samples_per_scenario: usize,
    max_len: usize,
    seed: u64,
) -> Result<HeldOutStats> {
    if scenarios.is_empty() || samples_per_scenario == 0 {
        return Err(Error::Input("held-out evaluation needs scenarios and samples".into()));
    }
    let opts = SampleOptions {
        temperature: 1.0,
        max_len,
        eos: Some(vocab::EOS),
    };
    let per: Vec<(f64, f64)> = scenarios
        .par_iter()
        .map(|s| {
            let prompt = encode_scenario(vocab, s)?;
            let mut reward = 0.0;
            let mut kl = 0.0;
            for k in 0..samples_per_scenario {
                let sample = params.sample_sequence(
                    &prompt,
                    &opts,
                    rng::derive_seed(seed, &[rng::label_hash(&s.id), k as u64]),
                )?;
                reward += rewards.composite(s, &sample.response_tokens).total;
                kl += params.kl_divergence(reference, &prompt, &sample.response_tokens)?;
            }
            Ok((reward, kl))
        })
        .collect::<Result<_>>()?;
    let n = scenarios.len() * samples_per_scenario;
    let (r, k) = per.iter().fold((0.0, 0.0), |(a, b), (r, k)| (a + r, b + k));
    Ok(HeldOutStats {
        mean_reward: r / n as f64,
        mean_kl_to_ref: k / n as f64,
        n_samples: n,
    })
}
