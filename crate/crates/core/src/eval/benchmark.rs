use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::TemperamentType;
use crate::scenario::{decode_response, encode_scenario, DecodedResponse, McQuestion};
use crate::toy_lm::vocab::{ANSWER_CLOSE, ANSWER_OPEN, EOS, THINK_CLOSE};
use crate::toy_lm::{argmax, PolicyParams, SampleOptions, TokenId, Vocab};

/// Longest reasoning segment decoded before options are scored.
pub const MAX_REASONING_TOKENS: usize = 8;

/// Accuracies of the 7B reference models (untuned, SFT, SFT+GRPO), kept as
/// ordinal targets only.
pub const REFERENCE_ACCURACY: [f64; 3] = [55.0, 62.0, 67.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMode {
    /// Score each option's answer segment by per-token log-likelihood.
    #[default]
    LogLikelihood,
    /// Greedily generate a full response and match its answer to an option.
    Generate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McAnswer {
    /// `None` when generation produced no parsable option.
    pub chosen: Option<usize>,
    /// Per-option mean log-probability (log-likelihood mode only).
    pub scores: Vec<f64>,
}

/// Greedy reasoning prefix ending in `</think>`.
fn reasoning_prefix(params: &PolicyParams, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
    let opts = SampleOptions {
        temperature: 0.0,
        max_len: MAX_REASONING_TOKENS,
        eos: Some(THINK_CLOSE),
    };
    let mut prefix = params.sample_sequence(prompt, &opts, 0)?.response_tokens;
    if prefix.last() != Some(&THINK_CLOSE) {
        prefix.push(THINK_CLOSE);
    }
    Ok(prefix)
}

/// Picks the option the policy prefers for the question.
///
/// In log-likelihood mode the policy first decodes its own reasoning greedily,
/// then every option is scored as the continuation
/// `<answer> option </answer> <eos>`, averaged per token. Ties go to the
/// lowest index.
pub fn answer_mc(params: &PolicyParams, vocab: &Vocab, question: &McQuestion, mode: McMode) -> Result<McAnswer> {
    let prompt = encode_scenario(vocab, &question.scenario)?;
    let option_ids: Vec<TokenId> = question
        .options
        .iter()
        .map(|o| vocab.strategy(o))
        .collect::<Result<_>>()?;
    match mode {
        McMode::LogLikelihood => {
            let prefix = reasoning_prefix(params, &prompt)?;
            let scores: Vec<f64> = option_ids
                .iter()
                .map(|&s| {
                    let mut response = prefix.clone();
                    response.extend([ANSWER_OPEN, s, ANSWER_CLOSE, EOS]);
                    let lp = params.log_prob(&prompt, &response)?;
                    let tail = &lp.step_log_probs[prefix.len()..];
                    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
                })
                .collect::<Result<_>>()?;
            Ok(McAnswer {
                chosen: Some(argmax(&scores)),
                scores,
            })
        }
        McMode::Generate => {
            let out = params.sample_sequence(&prompt, &SampleOptions::greedy(32), 0)?;
            let chosen = match decode_response(vocab, &out.response_tokens)? {
                DecodedResponse::Structured { answer, .. } => option_ids.iter().position(|&o| o == answer),
                DecodedResponse::Malformed => None,
            };
            Ok(McAnswer {
                chosen,
                scores: Vec::new(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub id: String,
    pub temperament: TemperamentType,
    pub chosen: Option<usize>,
    pub correct: usize,
}

impl QuestionOutcome {
    pub fn matched(&self) -> bool {
        self.chosen == Some(self.correct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperamentAccuracy {
    pub temperament: TemperamentType,
    pub n_questions: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub model_tag: String,
    pub size_tag: String,
    pub benchmark_hash: String,
    pub n_questions: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub per_temperament: Vec<TemperamentAccuracy>,
    pub outcomes: Vec<QuestionOutcome>,
}

impl BenchmarkResult {
    /// One row per question: `id,temperament,chosen,correct,match`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,temperament,chosen,correct,match\n");
        for o in &self.outcomes {
            let chosen = o.chosen.map_or(String::from("none"), |c| c.to_string());
            let _ = writeln!(out, "{},{},{},{},{}", o.id, o.temperament, chosen, o.correct, o.matched() as u8);
        }
        out
    }
}

/// SHA-256 over the questions' JSON encoding, one per line.
pub fn benchmark_hash(questions: &[McQuestion]) -> String {
    let mut h = Sha256::new();
    for q in questions {
        h.update(serde_json::to_vec(q).expect("question serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Parameter count with a K/M suffix, e.g. `15.4K`.
pub fn size_tag(params: &PolicyParams) -> String {
    let n = params.num_parameters() as f64;
    if n >= 1e6 {
        format!("{:.1}M", n / 1e6)
    } else if n >= 1e3 {
        format!("{:.1}K", n / 1e3)
    } else {
        format!("{n}")
    }
}

pub fn run_benchmark(
    params: &PolicyParams,
    vocab: &Vocab,
    benchmark: &[McQuestion],
    model_tag: &str,
    mode: McMode,
) -> Result<BenchmarkResult> {
    if benchmark.is_empty() {
        return Err(Error::Input("benchmark is empty".into()));
    }
    let outcomes: Vec<QuestionOutcome> = benchmark
        .par_iter()
        .map(|q| {
            Ok(QuestionOutcome {
                id: q.scenario.id.clone(),
                temperament: q.scenario.temperament,
                chosen: answer_mc(params, vocab, q, mode)?.chosen,
                correct: q.correct_index,
            })
        })
        .collect::<Result<_>>()?;
    let n_correct = outcomes.iter().filter(|o| o.matched()).count();
    let mut by_type: BTreeMap<TemperamentType, (usize, usize)> = BTreeMap::new();
    for o in &outcomes {
        let e = by_type.entry(o.temperament).or_default();
        e.0 += 1;
        e.1 += o.matched() as usize;
    }
    Ok(BenchmarkResult {
        model_tag: model_tag.to_string(),
        size_tag: size_tag(params),
        benchmark_hash: benchmark_hash(benchmark),
        n_questions: outcomes.len(),
        n_correct,
        accuracy: n_correct as f64 / outcomes.len() as f64,
        per_temperament: by_type
            .into_iter()
            .map(|(temperament, (n, c))| TemperamentAccuracy {
                temperament,
                n_questions: n,
                n_correct: c,
                accuracy: c as f64 / n as f64,
            })
            .collect(),
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub size: String,
    /// Percent.
    pub accuracy: f64,
    pub reference_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub benchmark_hash: String,
    pub n_questions: usize,
    pub rows: Vec<AblationRow>,
    /// `base < sft < sft+grpo`, strictly.
    pub ordinal_pattern_holds: bool,
}

pub fn ablation_report(
    base: &BenchmarkResult,
    sft: &BenchmarkResult,
    grpo: &BenchmarkResult,
) -> Result<AblationReport> {
    let results = [base, sft, grpo];
    if results.iter().any(|r| r.benchmark_hash != base.benchmark_hash || r.n_questions != base.n_questions) {
        return Err(Error::Input(
            "ablation results were computed on different benchmarks".into(),
        ));
    }
    let rows = results
        .iter()
        .zip(REFERENCE_ACCURACY)
        .map(|(r, reference)| AblationRow {
            model: r.model_tag.clone(),
            size: r.size_tag.clone(),
            accuracy: 100.0 * r.accuracy,
            reference_accuracy: reference,
        })
        .collect();
    Ok(AblationReport {
        benchmark_hash: base.benchmark_hash.clone(),
        n_questions: base.n_questions,
        rows,
        ordinal_pattern_holds: base.accuracy < sft.accuracy && sft.accuracy < grpo.accuracy,
    })
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,size,accuracy,reference_accuracy_7b,benchmark_hash\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.1},{:.1},{}",
                r.model, r.size, r.accuracy, r.reference_accuracy, self.benchmark_hash
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Benchmark accuracy ({} questions, 3 options each)", self.n_questions);
        let _ = writeln!(out, "{:-<62}", "");
        let _ = writeln!(out, "{:<22} {:>8} {:>13} {:>15}", "Model", "Size", "Accuracy (%)", "7B reference");
        let _ = writeln!(out, "{:-<62}", "");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<22} {:>8} {:>13.1} {:>15.1}",
                r.model, r.size, r.accuracy, r.reference_accuracy
            );
        }
        let _ = writeln!(out, "{:-<62}", "");
        let _ = writeln!(out, "ordinal pattern base < sft < sft+grpo: {}", self.ordinal_pattern_holds);
        let _ = writeln!(out, "benchmark sha256: {}", self.benchmark_hash);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::KnowledgeGraph;
    use crate::scenario::{generate_benchmark, illustrative_question, TrainingCorpora};

    fn setup() -> (Vocab, Vec<McQuestion>) {
        let g = KnowledgeGraph::bundled();
        let v = Vocab::from_graph(&g);
        let qs = generate_benchmark(&g, 30, 5, &TrainingCorpora::default()).unwrap();
        (v, qs)
    }

    fn result(tag: &str, acc: f64, hash: &str) -> BenchmarkResult {
        BenchmarkResult {
            model_tag: tag.into(),
            size_tag: "1K".into(),
            benchmark_hash: hash.into(),
            n_questions: 200,
            n_correct: (acc * 200.0) as usize,
            accuracy: acc,
            per_temperament: vec![],
            outcomes: vec![],
        }
    }

    #[test]
    fn uniform_policy_picks_first_option() {
        let (v, qs) = setup();
        let p = PolicyParams::zeros(v.len(), 3);
        for q in &qs {
            let a = answer_mc(&p, &v, q, McMode::LogLikelihood).unwrap();
            assert_eq!(a.chosen, Some(0));
        }
    }

    #[test]
    fn accuracy_matches_csv_flags() {
        let (v, qs) = setup();
        let p = PolicyParams::init(v.len(), 3, 9);
        let r = run_benchmark(&p, &v, &qs, "base", McMode::LogLikelihood).unwrap();
        let flags: usize = r.to_csv().lines().skip(1).map(|l| l.ends_with(",1") as usize).sum();
        assert_eq!(flags, r.n_correct);
        assert_eq!(r.accuracy, r.n_correct as f64 / r.n_questions as f64);
        let by_type: usize = r.per_temperament.iter().map(|t| t.n_questions).sum();
        assert_eq!(by_type, qs.len());
        assert!(run_benchmark(&p, &v, &[], "base", McMode::LogLikelihood).is_err());
    }

    #[test]
    fn choice_follows_strategy_not_position() {
        let (v, qs) = setup();
        let p = PolicyParams::init(v.len(), 3, 11);
        for q in &qs {
            let a = answer_mc(&p, &v, q, McMode::LogLikelihood).unwrap();
            let mut rotated = q.clone();
            rotated.options.rotate_left(1);
            let b = answer_mc(&p, &v, &rotated, McMode::LogLikelihood).unwrap();
            assert_eq!(q.options[a.chosen.unwrap()], rotated.options[b.chosen.unwrap()]);
        }
    }

    #[test]
    fn generate_mode_on_untrained_policy_rarely_parses() {
        let v = Vocab::from_graph(&KnowledgeGraph::bundled());
        let p = PolicyParams::zeros(v.len(), 3);
        let a = answer_mc(&p, &v, &illustrative_question(), McMode::Generate).unwrap();
        assert!(a.scores.is_empty());
        // greedy on a uniform policy repeats token 0 (`<think>`), never closing it
        assert_eq!(a.chosen, None);
    }

    #[test]
    fn ordinal_flag() {
        let paper = ablation_report(&result("base", 0.55, "h"), &result("sft", 0.62, "h"), &result("grpo", 0.67, "h")).unwrap();
        assert!(paper.ordinal_pattern_holds);
        assert!(paper.to_text().contains("benchmark sha256: h"));
        assert!(paper.to_csv().lines().nth(1).unwrap().starts_with("base,1K,55.0,55.0,h"));
        let flat = ablation_report(&result("a", 0.6, "h"), &result("b", 0.6, "h"), &result("c", 0.7, "h")).unwrap();
        assert!(!flat.ordinal_pattern_holds);
        assert!(ablation_report(&result("a", 0.5, "h"), &result("b", 0.6, "x"), &result("c", 0.7, "h")).is_err());
    }
}
