use super::vocab::TokenId;
use crate::error::{Error, Result};

/// Conditioning input for one next-token prediction.
///
/// The dense layout is `[prompt_summary | onehot(w_1) | ... | onehot(w_k)]`,
/// where `w_1` is the most recent token. Window slots before the start of the
/// sequence are left as all-zero blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    /// Normalized bag of prompt token ids (sums to 1 for a non-empty prompt).
    pub prompt_summary: Vec<f64>,
    /// Last `k` token ids of `prompt ++ prefix`, most recent first.
    pub recency_window: Vec<Option<TokenId>>,
}

impl ContextFeatures {
    pub fn new(
        prompt: &[TokenId],
        prefix: &[TokenId],
        vocab_size: usize,
        window: usize,
    ) -> Result<Self> {
        check_ids(prompt, vocab_size)?;
        check_ids(prefix, vocab_size)?;
        let mut prompt_summary = vec![0.0; vocab_size];
        for (j, x) in summary_entries(prompt) {
            prompt_summary[j] = x;
        }
        let recency_window = (1..=window)
            .map(|back| token_before(prompt, prefix, prefix.len(), back))
            .collect();
        Ok(ContextFeatures {
            prompt_summary,
            recency_window,
        })
    }

    pub fn dim(&self) -> usize {
        self.prompt_summary.len() * (self.recency_window.len() + 1)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let v = self.prompt_summary.len();
        let mut x = vec![0.0; self.dim()];
        x[..v].copy_from_slice(&self.prompt_summary);
        for (slot, tok) in self.recency_window.iter().enumerate() {
            if let Some(t) = tok {
                x[(slot + 1) * v + *t as usize] = 1.0;
            }
        }
        x
    }

    pub(crate) fn sparse(&self) -> Vec<(usize, f64)> {
        let v = self.prompt_summary.len();
        let mut out: Vec<(usize, f64)> = self
            .prompt_summary
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(j, x)| (j, *x))
            .collect();
        for (slot, tok) in self.recency_window.iter().enumerate() {
            if let Some(t) = tok {
                out.push(((slot + 1) * v + *t as usize, 1.0));
            }
        }
        out
    }
}

pub(crate) fn check_ids(ids: &[TokenId], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|&&t| t as usize >= vocab_size) {
        Some(t) => Err(Error::Input(format!(
            "token id {t} outside vocabulary of size {vocab_size}"
        ))),
        None => Ok(()),
    }
}

/// Sparse prompt summary: count of each id divided by prompt length, in id order.
pub(crate) fn summary_entries(prompt: &[TokenId]) -> Vec<(usize, f64)> {
    if prompt.is_empty() {
        return Vec::new();
    }
    let mut ids: Vec<TokenId> = prompt.to_vec();
    ids.sort_unstable();
    let n = prompt.len() as f64;
    let mut out: Vec<(usize, f64)> = Vec::new();
    for id in ids {
        match out.last_mut() {
            Some((j, c)) if *j == id as usize => *c += 1.0,
            _ => out.push((id as usize, 1.0)),
        }
    }
    for (_, c) in &mut out {
        *c /= n;
    }
    out
}

fn token_before(prompt: &[TokenId], prefix: &[TokenId], pos: usize, back: usize) -> Option<TokenId> {
    // position `pos` in the response; `back` tokens earlier in prompt ++ prefix
    let combined = prompt.len() + pos;
    if back > combined {
        return None;
    }
    let idx = combined - back;
    Some(if idx < prompt.len() {
        prompt[idx]
    } else {
        prefix[idx - prompt.len()]
    })
}

/// Incremental featurizer over one `prompt ++ response` path.
pub(crate) struct PathFeatures<'a> {
    summary: Vec<(usize, f64)>,
    prompt: &'a [TokenId],
    vocab_size: usize,
    window: usize,
}

impl<'a> PathFeatures<'a> {
    pub fn new(prompt: &'a [TokenId], vocab_size: usize, window: usize) -> Self {
        PathFeatures {
            summary: summary_entries(prompt),
            prompt,
            vocab_size,
            window,
        }
    }

    /// Sparse features for predicting `response[pos]`, written into `out`.
    pub fn at(&self, response: &[TokenId], pos: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.extend_from_slice(&self.summary);
        for back in 1..=self.window {
            if let Some(t) = token_before(self.prompt, response, pos, back) {
                out.push((back * self.vocab_size + t as usize, 1.0));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_is_normalized_bag() {
        let f = ContextFeatures::new(&[2, 0, 2, 1], &[], 4, 2).unwrap();
        assert_eq!(f.prompt_summary, vec![0.25, 0.25, 0.5, 0.0]);
        assert_eq!(f.recency_window, vec![Some(1), Some(2)]);
    }

    #[test]
    fn window_spans_prompt_and_prefix() {
        let f = ContextFeatures::new(&[3], &[1, 2], 4, 3).unwrap();
        assert_eq!(f.recency_window, vec![Some(2), Some(1), Some(3)]);
        let g = ContextFeatures::new(&[], &[1], 4, 3).unwrap();
        assert_eq!(g.recency_window, vec![Some(1), None, None]);
    }

    #[test]
    fn deterministic_and_consistent_with_path() {
        let prompt = [3, 1, 1];
        let resp = [0, 2, 3];
        let path = PathFeatures::new(&prompt, 4, 3);
        let mut buf = Vec::new();
        for pos in 0..=resp.len() {
            let a = ContextFeatures::new(&prompt, &resp[..pos], 4, 3).unwrap();
            let b = ContextFeatures::new(&prompt, &resp[..pos], 4, 3).unwrap();
            assert_eq!(a, b);
            path.at(&resp, pos, &mut buf);
            let mut dense = vec![0.0; a.dim()];
            for &(j, x) in &buf {
                dense[j] += x;
            }
            assert_eq!(dense, a.to_dense());
        }
    }

    #[test]
    fn rejects_out_of_range_ids() {
        assert!(ContextFeatures::new(&[4], &[], 4, 1).is_err());
    }
}
