//! Rating records, per-dimension aggregation, and a synthetic-rater stand-in
//! used to exercise the aggregation paths.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Read;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kappa::pairwise_mean_kappa;
use crate::error::{Error, Result};
use crate::kg::{Fit, KnowledgeGraph};
use crate::rewards::RewardModel;
use crate::rng;
use crate::scenario::{decode_response, encode_scenario, DecodedResponse, Scenario};
use crate::toy_lm::{PolicyParams, SampleOptions, TokenKind, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Knowledge,
    PsychAlign,
    Caregiving,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Knowledge, Dimension::PsychAlign, Dimension::Caregiving];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Knowledge => "knowledge",
            Dimension::PsychAlign => "psych_align",
            Dimension::Caregiving => "caregiving",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown rating dimension `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub model: String,
    pub item: String,
    pub rater: String,
    pub dimension: Dimension,
    pub score: f64,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Input(format!(
                "rating {}/{}/{} has score {} outside [0, 1]",
                self.model, self.item, self.rater, self.score
            )));
        }
        Ok(())
    }
}

/// Reads CSV records with header `model,item,rater,dimension,score`.
pub fn read_ratings(reader: impl Read) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (line, rec) in rdr.deserialize::<RatingRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::Input(format!("ratings record {}: {e}", line + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_ratings(records: &[RatingRecord]) -> String {
    let mut out = String::from("model,item,rater,dimension,score\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{:.4}", r.model, r.item, r.rater, r.dimension, r.score);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub model: String,
    pub n_items: usize,
    /// Indexed like [`Dimension::ALL`]; `None` when a model has no ratings on
    /// that dimension.
    pub means: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTable {
    /// Models in order of first appearance.
    pub rows: Vec<RatingRow>,
    /// Mean of pairwise Cohen's kappas over raters, on scores rounded to one
    /// decimal; `None` with fewer than two raters or no fully co-rated items.
    pub kappa: Option<f64>,
    pub kappa_method: String,
}

/// Scores are compared as tenths when computing agreement.
fn kappa_label(score: f64) -> i64 {
    (score * 10.0).round() as i64
}

/// Mean score per model and dimension: ratings are first averaged over raters
/// within an item, then over items.
pub fn aggregate_ratings(records: &[RatingRecord]) -> Result<RatingTable> {
    if records.is_empty() {
        return Err(Error::Input("no rating records".into()));
    }
    let mut models: Vec<&str> = Vec::new();
    // (model, dimension) -> item -> scores
    let mut cells: BTreeMap<(&str, Dimension), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        cells
            .entry((&r.model, r.dimension))
            .or_default()
            .entry(&r.item)
            .or_default()
            .push(r.score);
    }
    let rows = models
        .iter()
        .map(|&m| {
            let mut n_items = 0;
            let means = Dimension::ALL.map(|d| {
                let items = cells.get(&(m, d))?;
                n_items = n_items.max(items.len());
                let item_means = items.values().map(|s| s.iter().sum::<f64>() / s.len() as f64);
                Some(item_means.sum::<f64>() / items.len() as f64)
            });
            RatingRow {
                model: m.to_string(),
                n_items,
                means,
            }
        })
        .collect();
    Ok(RatingTable {
        rows,
        kappa: multi_rater_kappa(records)?,
        kappa_method: "pairwise-mean Cohen".into(),
    })
}

fn multi_rater_kappa(records: &[RatingRecord]) -> Result<Option<f64>> {
    let mut by_unit: BTreeMap<(&str, &str, Dimension), BTreeMap<&str, i64>> = BTreeMap::new();
    let mut raters: Vec<&str> = Vec::new();
    for r in records {
        by_unit
            .entry((&r.model, &r.item, r.dimension))
            .or_default()
            .insert(&r.rater, kappa_label(r.score));
        if !raters.contains(&r.rater.as_str()) {
            raters.push(&r.rater);
        }
    }
    if raters.len() < 2 {
        return Ok(None);
    }
    let mut columns: Vec<Vec<i64>> = vec![Vec::new(); raters.len()];
    for labels in by_unit.values().filter(|l| l.len() == raters.len()) {
        for (col, r) in columns.iter_mut().zip(&raters) {
            col.push(labels[r]);
        }
    }
    if columns[0].is_empty() {
        return Ok(None);
    }
    pairwise_mean_kappa(&columns).map(Some)
}

impl RatingTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,knowledge,psych_align,caregiving,n_items\n");
        for r in &self.rows {
            let cells: Vec<String> = r.means.iter().map(|m| m.map_or(String::new(), |x| format!("{x:.4}"))).collect();
            let _ = writeln!(out, "{},{},{}", r.model, cells.join(","), r.n_items);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Mean ratings (0-1 scale)");
        let _ = writeln!(out, "{:-<66}", "");
        let _ = writeln!(out, "{:<22} {:>12} {:>14} {:>14}", "Model", "Knowledge", "Psych. align", "Caregiving");
        let _ = writeln!(out, "{:-<66}", "");
        for r in &self.rows {
            let cells: Vec<String> = r.means.iter().map(|m| m.map_or("-".into(), |x| format!("{x:.4}"))).collect();
            let _ = writeln!(out, "{:<22} {:>12} {:>14} {:>14}", r.model, cells[0], cells[1], cells[2]);
        }
        let _ = writeln!(out, "{:-<66}", "");
        match self.kappa {
            Some(k) => {
                let _ = writeln!(out, "inter-rater kappa ({}): {k:.4}", self.kappa_method);
            }
            None => {
                let _ = writeln!(out, "inter-rater kappa: n/a");
            }
        }
        out
    }
}

/// Heuristic rater standing in for a human expert. It decodes the model's
/// greedy response and scores it against the graph, with a per-rater seeded
/// perturbation so that agreement is high but not perfect.
pub fn synthetic_ratings(
    graph: &KnowledgeGraph,
    vocab: &Vocab,
    params: &PolicyParams,
    model: &str,
    scenarios: &[Scenario],
    n_raters: usize,
    seed: u64,
) -> Result<Vec<RatingRecord>> {
    let rewards = RewardModel::new(graph, vocab);
    let mut out = Vec::new();
    for s in scenarios {
        let prompt = encode_scenario(vocab, s)?;
        let response = params.sample_sequence(&prompt, &SampleOptions::greedy(32), 0)?.response_tokens;
        let decoded = decode_response(vocab, &response)?;
        let r = rewards.composite(s, &response);
        let caregiving = match &decoded {
            DecodedResponse::Structured { answer, .. } => match vocab.kind(*answer) {
                TokenKind::Strategy(id) => match graph.goodness_of_fit(id, s.temperament) {
                    Ok(Fit::Fits) => 1.0,
                    Ok(Fit::Neutral) => 0.5,
                    _ => 0.0,
                },
                _ => 0.0,
            },
            DecodedResponse::Malformed => 0.0,
        };
        let base = [r.r_know, r.r_temp * r.r_fmt, caregiving];
        for rater in 0..n_raters {
            let mut noise = rng::stream(seed, &[rng::label_hash(model), rng::label_hash(&s.id), rater as u64]);
            for (d, b) in Dimension::ALL.into_iter().zip(base) {
                let jitter: f64 = if noise.random_bool(0.2) {
                    noise.random_range(-2..=2) as f64 / 10.0
                } else {
                    0.0
                };
                out.push(RatingRecord {
                    model: model.to_string(),
                    item: s.id.clone(),
                    rater: format!("rater{}", rater + 1),
                    dimension: d,
                    score: (0.6 + 0.4 * b + jitter).clamp(0.0, 1.0),
                });
            }
        }
    }
    Ok(out)
}
