//! Seeded synthesis of the three corpora: SFT examples with structured
//! chain-of-thought targets, RL scenarios, and the multiple-choice benchmark.
//!
//! A scenario's prompt is its behavior cues (trait tokens, in vocabulary
//! order) followed by its query (situation and setting tokens). The
//! temperament label is not part of the prompt; identifying it is the first
//! step of the structured response:
//!
//! ```text
//! <think> temp:T trait:a trait:b </think> <answer> strat:s </answer> <eos>
//! ```

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, TemperamentType};
use crate::rng;
use crate::toy_lm::vocab::{self, TokenId, TokenKind, Vocab};

const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub temperament: TemperamentType,
    /// Trait symbols (`trait:*`).
    pub cues: Vec<String>,
    /// Situation and setting symbols (`sit:*`, `set:*`).
    pub query: Vec<String>,
    /// Strategy id.
    pub reference_strategy: String,
}

impl Scenario {
    /// Content identity used to keep benchmark items out of training corpora.
    pub fn signature(&self) -> String {
        let mut cues = self.cues.clone();
        cues.sort();
        format!("{}|{}|{}", self.temperament, cues.join(","), self.query.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub scenario: Scenario,
    pub target_response: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McQuestion {
    pub scenario: Scenario,
    /// Exactly three strategy ids.
    pub options: Vec<String>,
    pub correct_index: usize,
}

/// Result of parsing a response against the structured format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodedResponse {
    Structured {
        reasoning: Vec<TokenId>,
        answer: TokenId,
    },
    Malformed,
}

impl DecodedResponse {
    pub fn is_structured(&self) -> bool {
        matches!(self, DecodedResponse::Structured { .. })
    }
}

/// Number of items per temperament under largest-remainder apportionment of
/// `n` by the graph's prevalences (ties go to the earlier temperament).
pub fn apportion(graph: &KnowledgeGraph, n: usize) -> [usize; 4] {
    let quotas: Vec<f64> = graph.profiles().iter().map(|p| p.prevalence * n as f64).collect();
    let total: f64 = graph.profiles().iter().map(|p| p.prevalence).sum();
    let quotas: Vec<f64> = quotas.iter().map(|q| q / total).collect();
    let mut counts = [0usize; 4];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..4).collect();
    // remainders compared at 1e-9 so float noise cannot reorder exact ties
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        if (ra - rb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            rb.partial_cmp(&ra).expect("finite remainders")
        }
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn temperament_schedule(graph: &KnowledgeGraph, n: usize, seed: u64, kind: &str) -> Vec<TemperamentType> {
    let counts = apportion(graph, n);
    let mut out: Vec<TemperamentType> = TemperamentType::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&t, c)| std::iter::repeat_n(t, c))
        .collect();
    out.shuffle(&mut rng::stream(seed, &[rng::label_hash(kind), rng::label_hash("mix")]));
    out
}

/// Reference strategy for a temperament in a situation: the situation's
/// catalog position selects one of the temperament's advice strategies.
pub fn reference_strategy(graph: &KnowledgeGraph, t: TemperamentType, situation: &str) -> Result<String> {
    let idx = graph
        .catalog()
        .situations
        .iter()
        .position(|s| s == situation)
        .ok_or_else(|| Error::Input(format!("unknown situation `{situation}`")))?;
    let advice = &graph.profile_of(t).advice;
    Ok(advice[idx % advice.len()].clone())
}

fn draw_scenario(graph: &KnowledgeGraph, t: TemperamentType, id: String, r: &mut impl Rng) -> Scenario {
    let traits = |t: TemperamentType| &graph.profile_of(t).traits;
    let mut cues: Vec<&String> = match t {
        TemperamentType::Mixed => {
            let mut c: Vec<&String> = traits(t).choose_multiple(r, 2).collect();
            let others: Vec<TemperamentType> = TemperamentType::ALL
                .into_iter()
                .filter(|&o| o != TemperamentType::Mixed)
                .collect();
            for o in others.choose_multiple(r, 2) {
                c.push(traits(*o).choose(r).expect("non-empty traits"));
            }
            c
        }
        _ => {
            let k = r.random_range(2..=3).min(traits(t).len());
            traits(t).choose_multiple(r, k).collect()
        }
    };
    cues.sort();
    let catalog = graph.catalog();
    let situation = catalog.situations.choose(r).expect("non-empty catalog");
    let setting = catalog.settings.choose(r).expect("non-empty catalog");
    Scenario {
        id,
        temperament: t,
        cues: cues.into_iter().map(|c| format!("trait:{c}")).collect(),
        query: vec![format!("sit:{situation}"), format!("set:{setting}")],
        reference_strategy: reference_strategy(graph, t, situation).expect("catalog situation"),
    }
}

fn generate(
    graph: &KnowledgeGraph,
    n: usize,
    seed: u64,
    kind: &str,
    exclude: &HashSet<String>,
) -> Result<Vec<Scenario>> {
    if n == 0 {
        return Err(Error::Input(format!("{kind} corpus size must be at least 1")));
    }
    temperament_schedule(graph, n, seed, kind)
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = rng::stream(seed, &[rng::label_hash(kind), i as u64]);
            let id = format!("{kind}-{i:05}");
            for _ in 0..MAX_REDRAWS {
                let s = draw_scenario(graph, t, id.clone(), &mut r);
                if !exclude.contains(&s.signature()) {
                    return Ok(s);
                }
            }
            Err(Error::Config(format!(
                "could not draw a {t} scenario outside the training corpora for `{id}`"
            )))
        })
        .collect()
}

/// Gold structured response: temperament, two of its traits, the reference strategy.
pub fn gold_response(graph: &KnowledgeGraph, scenario: &Scenario) -> Vec<String> {
    let own: Vec<&String> = scenario
        .cues
        .iter()
        .filter(|c| {
            c.strip_prefix("trait:")
                .and_then(|name| graph.trait_owner(name))
                == Some(scenario.temperament)
        })
        .collect();
    let fallback = graph
        .profile_of(scenario.temperament)
        .traits
        .iter()
        .map(|t| format!("trait:{t}"));
    let mut reasoning: Vec<String> = own.into_iter().cloned().collect();
    for t in fallback {
        if reasoning.len() >= 2 {
            break;
        }
        if !reasoning.contains(&t) {
            reasoning.push(t);
        }
    }
    reasoning.truncate(2);

    let mut out = vec![
        vocab::RESERVED[vocab::THINK_OPEN as usize].to_string(),
        vocab::temperament_symbol(scenario.temperament),
    ];
    out.extend(reasoning);
    out.extend([
        vocab::RESERVED[vocab::THINK_CLOSE as usize].to_string(),
        vocab::RESERVED[vocab::ANSWER_OPEN as usize].to_string(),
        vocab::strategy_symbol(&scenario.reference_strategy),
        vocab::RESERVED[vocab::ANSWER_CLOSE as usize].to_string(),
        vocab::RESERVED[vocab::EOS as usize].to_string(),
    ]);
    out
}

pub fn generate_sft_dataset(graph: &KnowledgeGraph, n: usize, seed: u64) -> Result<Vec<SftExample>> {
    Ok(generate(graph, n, seed, "sft", &HashSet::new())?
        .into_iter()
        .map(|scenario| SftExample {
            target_response: gold_response(graph, &scenario),
            scenario,
        })
        .collect())
}

pub fn generate_rl_scenarios(graph: &KnowledgeGraph, n: usize, seed: u64) -> Result<Vec<Scenario>> {
    generate(graph, n, seed, "rl", &HashSet::new())
}

/// What the benchmark must stay disjoint from.
#[derive(Debug, Clone, Default)]
pub struct TrainingCorpora {
    pub seeds: Vec<u64>,
    pub signatures: HashSet<String>,
}

impl TrainingCorpora {
    pub fn new<'a>(seeds: &[u64], scenarios: impl IntoIterator<Item = &'a Scenario>) -> Self {
        TrainingCorpora {
            seeds: seeds.to_vec(),
            signatures: scenarios.into_iter().map(Scenario::signature).collect(),
        }
    }
}

/// Three-option questions whose scenarios never coincide with a training
/// scenario. Options: the reference strategy (the only one that fits), a
/// strategy that conflicts with the temperament, and what another temperament
/// would be advised in the same situation.
pub fn generate_benchmark(
    graph: &KnowledgeGraph,
    n: usize,
    seed: u64,
    training: &TrainingCorpora,
) -> Result<Vec<McQuestion>> {
    if training.seeds.contains(&seed) {
        return Err(Error::Config(format!(
            "benchmark seed {seed} collides with a training corpus seed"
        )));
    }
    let scenarios = generate(graph, n, seed, "mc", &training.signatures)?;
    scenarios
        .into_iter()
        .enumerate()
        .map(|(i, scenario)| {
            let mut r = rng::stream(seed, &[rng::label_hash("mc-options"), i as u64]);
            build_question(graph, scenario, &mut r)
        })
        .collect()
}

fn build_question(graph: &KnowledgeGraph, scenario: Scenario, r: &mut impl Rng) -> Result<McQuestion> {
    let t = scenario.temperament;
    let conflicts: Vec<&str> = graph.conflicts_for(t).iter().map(|s| s.id.as_str()).collect();
    let conflict = *conflicts
        .choose(r)
        .ok_or_else(|| Error::Schema(format!("no strategy conflicts with `{t}`")))?;
    let situation = scenario.query[0].trim_start_matches("sit:");
    let other = **TemperamentType::ALL
        .iter()
        .filter(|&&o| o != t)
        .collect::<Vec<_>>()
        .choose(r)
        .expect("three other temperaments");
    let mut options = vec![
        scenario.reference_strategy.clone(),
        conflict.to_string(),
        reference_strategy(graph, other, situation)?,
    ];
    options.shuffle(r);
    let correct_index = options
        .iter()
        .position(|o| *o == scenario.reference_strategy)
        .expect("reference is an option");
    Ok(McQuestion {
        scenario,
        options,
        correct_index,
    })
}

/// The caregiving example used to illustrate the benchmark: a slow-to-warm-up
/// child hides when guests visit. Option A (wait and gently invite) is the fit.
pub fn illustrative_question() -> McQuestion {
    McQuestion {
        scenario: Scenario {
            id: "example-guests".into(),
            temperament: TemperamentType::SlowToWarmUp,
            cues: vec!["trait:cautious_observation".into(), "trait:novelty_avoidance".into()],
            query: vec!["sit:guests_visit".into(), "set:home".into()],
            reference_strategy: "avoid_forcing".into(),
        },
        options: vec![
            "avoid_forcing".into(),
            "force_immediate_socializing".into(),
            "leave_alone_until_ready".into(),
        ],
        correct_index: 0,
    }
}

/// Prompt tokens: cues in vocabulary order, then the query.
pub fn encode_scenario(vocab: &Vocab, scenario: &Scenario) -> Result<Vec<TokenId>> {
    let mut cues = vocab.encode(&scenario.cues)?;
    cues.sort_unstable();
    cues.extend(vocab.encode(&scenario.query)?);
    Ok(cues)
}

/// Parses `<think> r+ </think> <answer> s </answer> <eos>` where the reasoning
/// contains no delimiters and `s` is a single strategy token.
pub fn decode_response(vocab: &Vocab, tokens: &[TokenId]) -> Result<DecodedResponse> {
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab.len()) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary")));
    }
    use vocab::{ANSWER_CLOSE, ANSWER_OPEN, EOS, THINK_CLOSE, THINK_OPEN};
    let malformed = Ok(DecodedResponse::Malformed);
    if tokens.first() != Some(&THINK_OPEN) {
        return malformed;
    }
    let Some(close) = tokens.iter().position(|&t| t == THINK_CLOSE) else {
        return malformed;
    };
    let reasoning = &tokens[1..close];
    if reasoning.is_empty() || reasoning.iter().any(|&t| vocab.kind(t) == TokenKind::Reserved) {
        return malformed;
    }
    match &tokens[close + 1..] {
        [ANSWER_OPEN, s, ANSWER_CLOSE, EOS] if matches!(vocab.kind(*s), TokenKind::Strategy(_)) => {
            Ok(DecodedResponse::Structured {
                reasoning: reasoning.to_vec(),
                answer: *s,
            })
        }
        _ => malformed,
    }
}
