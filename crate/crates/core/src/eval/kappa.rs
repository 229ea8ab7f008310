use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Cohen's kappa between two raters labelling the same items.
///
/// When both raters put all mass on one label the chance agreement is 1;
/// kappa is then defined as 1 if they agree everywhere and is an error
/// otherwise.
pub fn cohen_kappa<L: Ord>(labels_a: &[L], labels_b: &[L]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::Input(format!(
            "kappa over label lists of different lengths ({} vs {})",
            labels_a.len(),
            labels_b.len()
        )));
    }
    if labels_a.is_empty() {
        return Err(Error::Input("kappa over empty label lists".into()));
    }
    let n = labels_a.len() as f64;
    let mut marginals: BTreeMap<&L, (usize, usize)> = BTreeMap::new();
    let mut agree = 0usize;
    for (a, b) in labels_a.iter().zip(labels_b) {
        marginals.entry(a).or_default().0 += 1;
        marginals.entry(b).or_default().1 += 1;
        agree += (a == b) as usize;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = marginals
        .values()
        .map(|&(ca, cb)| (ca as f64 / n) * (cb as f64 / n))
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return if agree == labels_a.len() {
            Ok(1.0)
        } else {
            Err(Error::UndefinedKappa { observed: p_o })
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Mean of the pairwise Cohen's kappas over all rater pairs.
pub fn pairwise_mean_kappa<L: Ord>(raters: &[Vec<L>]) -> Result<f64> {
    if raters.len() < 2 {
        return Err(Error::Input("multi-rater kappa needs at least two raters".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..raters.len() {
        for j in i + 1..raters.len() {
            total += cohen_kappa(&raters[i], &raters[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
