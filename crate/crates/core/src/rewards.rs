//! Composite reward `R = R_fmt + R_temp + R_know`, checked against the graph.
//!
//! Gating: a response that fails the format check scores zero on all three
//! terms, since neither its reasoning nor its answer can be extracted.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::kg::{Fit, KnowledgeGraph};
use crate::scenario::{decode_response, DecodedResponse, Scenario};
use crate::toy_lm::vocab::{TokenId, TokenKind, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fmt: f64,
    pub r_temp: f64,
    pub r_know: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub const ZERO: RewardBreakdown = RewardBreakdown {
        r_fmt: 0.0,
        r_temp: 0.0,
        r_know: 0.0,
        total: 0.0,
    };

    fn new(r_fmt: f64, r_temp: f64, r_know: f64) -> Self {
        RewardBreakdown {
            r_fmt,
            r_temp,
            r_know,
            total: r_fmt + r_temp + r_know,
        }
    }
}

/// Scores responses for one graph and vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct RewardModel<'a> {
    graph: &'a KnowledgeGraph,
    vocab: &'a Vocab,
}

impl<'a> RewardModel<'a> {
    pub fn new(graph: &'a KnowledgeGraph, vocab: &'a Vocab) -> Self {
        RewardModel { graph, vocab }
    }

    fn decode(&self, tokens: &[TokenId]) -> DecodedResponse {
        decode_response(self.vocab, tokens).unwrap_or(DecodedResponse::Malformed)
    }

    /// 1 iff the response parses in the structured format.
    pub fn format(&self, tokens: &[TokenId]) -> f64 {
        if self.decode(tokens).is_structured() {
            1.0
        } else {
            0.0
        }
    }

    /// 1 iff the reasoning names the scenario's temperament and at least one
    /// trait of that temperament.
    pub fn temperament(&self, scenario: &Scenario, decoded: &DecodedResponse) -> f64 {
        let DecodedResponse::Structured { reasoning, .. } = decoded else {
            return 0.0;
        };
        let t = scenario.temperament;
        let names_type = reasoning
            .iter()
            .any(|&tok| self.vocab.kind(tok) == TokenKind::Temperament(t));
        let cites_trait = reasoning.iter().any(|&tok| match self.vocab.kind(tok) {
            TokenKind::Trait(name) => self.graph.trait_owner(name) == Some(t),
            _ => false,
        });
        if names_type && cites_trait {
            1.0
        } else {
            0.0
        }
    }

    /// 1 for the reference strategy, 0.5 for another strategy that fits the
    /// temperament, 0 otherwise.
    pub fn knowledge(&self, scenario: &Scenario, decoded: &DecodedResponse) -> f64 {
        let DecodedResponse::Structured { answer, .. } = decoded else {
            return 0.0;
        };
        let TokenKind::Strategy(id) = self.vocab.kind(*answer) else {
            return 0.0;
        };
        if id == scenario.reference_strategy {
            return 1.0;
        }
        match self.graph.goodness_of_fit(id, scenario.temperament) {
            Ok(Fit::Fits) => 0.5,
            Ok(_) => 0.0,
            Err(e) => {
                warn!("scenario {}: {e}; scoring knowledge as 0", scenario.id);
                0.0
            }
        }
    }

    pub fn composite(&self, scenario: &Scenario, tokens: &[TokenId]) -> RewardBreakdown {
        let decoded = self.decode(tokens);
        if !decoded.is_structured() {
            return RewardBreakdown::ZERO;
        }
        RewardBreakdown::new(
            1.0,
            self.temperament(scenario, &decoded),
            self.knowledge(scenario, &decoded),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::TemperamentType;
    use crate::scenario::{generate_sft_dataset, gold_response};
    use crate::toy_lm::vocab::*;

    struct Fixture {
        graph: KnowledgeGraph,
        vocab: Vocab,
    }

    impl Fixture {
        fn new() -> Self {
            let graph = KnowledgeGraph::bundled();
            let vocab = Vocab::from_graph(&graph);
            Fixture { graph, vocab }
        }

        fn model(&self) -> RewardModel<'_> {
            RewardModel::new(&self.graph, &self.vocab)
        }

        fn scenario(&self, t: TemperamentType, situation: &str) -> Scenario {
            Scenario {
                id: "t".into(),
                temperament: t,
                cues: vec![],
                query: vec![format!("sit:{situation}"), "set:home".into()],
                reference_strategy: crate::scenario::reference_strategy(&self.graph, t, situation).unwrap(),
            }
        }

        fn response(&self, reasoning: &[&str], answer: &str) -> Vec<TokenId> {
            let mut out = vec![THINK_OPEN];
            out.extend(reasoning.iter().map(|s| self.vocab.id(s).unwrap()));
            out.extend([THINK_CLOSE, ANSWER_OPEN, self.vocab.id(answer).unwrap(), ANSWER_CLOSE, EOS]);
            out
        }
    }

    #[test]
    fn gold_scores_three() {
        let f = Fixture::new();
        for ex in generate_sft_dataset(&f.graph, 200, 8).unwrap() {
            let ids = f.vocab.encode(&ex.target_response).unwrap();
            let r = f.model().composite(&ex.scenario, &ids);
            assert_eq!((r.r_fmt, r.r_temp, r.r_know, r.total), (1.0, 1.0, 1.0, 3.0));
        }
    }

    #[test]
    fn wrong_temperament_traits_fail_alignment() {
        let f = Fixture::new();
        let s = f.scenario(TemperamentType::Difficult, "bedtime");
        let resp = f.response(
            &["temp:difficult", "trait:cheerful_mood", "trait:quick_adaptability"],
            "strat:predictable_routine",
        );
        let r = f.model().composite(&s, &resp);
        assert_eq!((r.r_fmt, r.r_temp), (1.0, 0.0));
        let only_type = f.response(&["temp:difficult"], "strat:predictable_routine");
        assert_eq!(f.model().composite(&s, &only_type).r_temp, 0.0);
    }

    #[test]
    fn knowledge_tiers() {
        let f = Fixture::new();
        let s = f.scenario(TemperamentType::SlowToWarmUp, "guests_visit");
        assert_eq!(s.reference_strategy, "avoid_forcing");
        let think = ["temp:slow_to_warm_up", "trait:novelty_avoidance"];
        let m = f.model();
        assert_eq!(m.composite(&s, &f.response(&think, "strat:avoid_forcing")).total, 3.0);
        let partial = m.composite(&s, &f.response(&think, "strat:gradual_exposure"));
        assert_eq!((partial.r_fmt, partial.r_temp, partial.r_know, partial.total), (1.0, 1.0, 0.5, 2.5));
        let conflict = m.composite(&s, &f.response(&think, "strat:force_immediate_socializing"));
        assert_eq!(conflict.r_know, 0.0);
        let neutral = m.composite(&s, &f.response(&think, "strat:predictable_routine"));
        assert_eq!(neutral.r_know, 0.0);
    }

    #[test]
    fn format_gate_zeroes_everything() {
        let f = Fixture::new();
        let s = f.scenario(TemperamentType::Easy, "mealtime");
        let mut resp = f.response(&["temp:easy", "trait:cheerful_mood"], &format!("strat:{}", s.reference_strategy));
        assert_eq!(f.model().composite(&s, &resp).total, 3.0);
        resp.swap(0, 1);
        assert_eq!(f.model().composite(&s, &resp), RewardBreakdown::ZERO);
        assert_eq!(f.model().composite(&s, &[]), RewardBreakdown::ZERO);
        assert_eq!(f.model().format(&[]), 0.0);
        assert_eq!(f.model().composite(&s, &[10_000]), RewardBreakdown::ZERO);
    }

    #[test]
    fn unknown_strategy_token_scores_zero_knowledge() {
        let graph = KnowledgeGraph::bundled();
        let mut symbols: Vec<String> = Vocab::from_graph(&graph).tokens()[RESERVED.len()..].to_vec();
        symbols.push("strat:not_in_graph".into());
        let vocab = Vocab::with_symbols(symbols).unwrap();
        let model = RewardModel::new(&graph, &vocab);
        let s = Scenario {
            id: "u".into(),
            temperament: TemperamentType::Easy,
            cues: vec![],
            query: vec!["sit:bedtime".into()],
            reference_strategy: "attend_subtle_signals".into(),
        };
        let resp = vec![
            THINK_OPEN,
            vocab.id("temp:easy").unwrap(),
            vocab.id("trait:cheerful_mood").unwrap(),
            THINK_CLOSE,
            ANSWER_OPEN,
            vocab.id("strat:not_in_graph").unwrap(),
            ANSWER_CLOSE,
            EOS,
        ];
        let r = model.composite(&s, &resp);
        assert_eq!((r.r_fmt, r.r_temp, r.r_know), (1.0, 1.0, 0.0));
    }

    #[test]
    fn gold_helper_matches_dataset() {
        let f = Fixture::new();
        let ex = &generate_sft_dataset(&f.graph, 1, 2).unwrap()[0];
        assert_eq!(gold_response(&f.graph, &ex.scenario), ex.target_response);
    }
}
