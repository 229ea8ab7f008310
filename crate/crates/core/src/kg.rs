//! Temperament knowledge graph.
//!
//! The graph ships as a TOML data file (see `data/thomas_chess.toml` for the
//! schema) so alternative temperament frameworks can be swapped in without
//! code changes. Loading validates every structural invariant up front; a
//! [`KnowledgeGraph`] that exists is always consistent, and it is immutable
//! afterwards.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const BUNDLED_GRAPH: &str = include_str!("../data/thomas_chess.toml");
const SCHEMA_TAG: &str = "temperament-graph/1";
const PREVALENCE_TOLERANCE: f64 = 0.01;

/// Thomas-Chess temperament category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperamentType {
    Easy,
    Difficult,
    SlowToWarmUp,
    Mixed,
}

impl TemperamentType {
    pub const ALL: [TemperamentType; 4] = [
        TemperamentType::Easy,
        TemperamentType::Difficult,
        TemperamentType::SlowToWarmUp,
        TemperamentType::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemperamentType::Easy => "easy",
            TemperamentType::Difficult => "difficult",
            TemperamentType::SlowToWarmUp => "slow_to_warm_up",
            TemperamentType::Mixed => "mixed",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TemperamentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemperamentType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemperamentType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown temperament `{s}`")))
    }
}

/// Goodness-of-fit verdict between a strategy and a temperament.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fit {
    Fits,
    Conflicts,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperamentProfile {
    pub temperament: TemperamentType,
    pub prevalence: f64,
    pub traits: Vec<String>,
    /// Strategy ids, in graph order.
    pub advice: Vec<String>,
    pub example_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyNode {
    pub id: String,
    pub description: String,
    pub fits: BTreeSet<TemperamentType>,
    pub conflicts: BTreeSet<TemperamentType>,
    /// Editorially derived node, not an advice bullet.
    pub distractor: bool,
}

/// Scenario vocabulary carried alongside the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub situations: Vec<String>,
    pub settings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    name: String,
    profiles: Vec<TemperamentProfile>,
    strategies: Vec<StrategyNode>,
    strategy_index: HashMap<String, usize>,
    trait_owner: HashMap<String, TemperamentType>,
    catalog: Catalog,
    hash: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    schema: String,
    name: String,
    #[serde(default, rename = "profile")]
    profiles: Vec<RawProfile>,
    #[serde(default, rename = "strategy")]
    strategies: Vec<RawStrategy>,
    catalog: Catalog,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    #[serde(rename = "type")]
    temperament: TemperamentType,
    prevalence: f64,
    traits: Vec<String>,
    advice: Vec<String>,
    example: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStrategy {
    id: String,
    description: String,
    #[serde(default)]
    fits: BTreeSet<TemperamentType>,
    #[serde(default)]
    conflicts: BTreeSet<TemperamentType>,
    #[serde(default)]
    distractor: bool,
}

impl KnowledgeGraph {
    /// The bundled Thomas-Chess graph.
    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED_GRAPH).expect("bundled graph is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawGraph =
            toml::from_str(text).map_err(|e| Error::Schema(format!("malformed graph file: {e}")))?;
        if raw.schema != SCHEMA_TAG {
            return Err(Error::Schema(format!(
                "unsupported schema `{}` (expected `{SCHEMA_TAG}`)",
                raw.schema
            )));
        }
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        Self::validate(raw, hash)
    }

    fn validate(raw: RawGraph, hash: String) -> Result<Self> {
        let mut by_type: HashMap<TemperamentType, RawProfile> = HashMap::new();
        for p in raw.profiles {
            let t = p.temperament;
            if by_type.insert(t, p).is_some() {
                return Err(Error::Schema(format!("duplicate profile `{t}`")));
            }
        }
        for t in TemperamentType::ALL {
            if !by_type.contains_key(&t) {
                return Err(Error::Schema(format!("missing profile `{t}`")));
            }
        }

        let mut strategy_index = HashMap::new();
        let mut strategies = Vec::with_capacity(raw.strategies.len());
        for (i, s) in raw.strategies.into_iter().enumerate() {
            if strategy_index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate strategy `{}`", s.id)));
            }
            if let Some(t) = s.fits.intersection(&s.conflicts).next() {
                return Err(Error::Schema(format!(
                    "strategy `{}` both fits and conflicts with `{t}`",
                    s.id
                )));
            }
            strategies.push(StrategyNode {
                id: s.id,
                description: s.description,
                fits: s.fits,
                conflicts: s.conflicts,
                distractor: s.distractor,
            });
        }

        let mut profiles = Vec::with_capacity(4);
        let mut trait_owner = HashMap::new();
        let mut referenced = HashSet::new();
        let mut total_prevalence = 0.0;
        for t in TemperamentType::ALL {
            let p = by_type.remove(&t).expect("checked above");
            if !(0.0..=1.0).contains(&p.prevalence) {
                return Err(Error::Schema(format!(
                    "profile `{t}` prevalence {} outside [0, 1]",
                    p.prevalence
                )));
            }
            if p.traits.is_empty() {
                return Err(Error::Schema(format!("profile `{t}` has no traits")));
            }
            if p.advice.is_empty() {
                return Err(Error::Schema(format!("profile `{t}` has no advice")));
            }
            for tr in &p.traits {
                if let Some(prev) = trait_owner.insert(tr.clone(), t) {
                    return Err(Error::Schema(format!(
                        "trait `{tr}` listed under both `{prev}` and `{t}`"
                    )));
                }
            }
            for a in &p.advice {
                let Some(&i) = strategy_index.get(a) else {
                    return Err(Error::Schema(format!(
                        "profile `{t}` references unknown strategy `{a}`"
                    )));
                };
                if !strategies[i].fits.contains(&t) {
                    return Err(Error::Schema(format!(
                        "profile `{t}` advises `{a}` but the strategy does not list `{t}` in fits"
                    )));
                }
                referenced.insert(a.clone());
            }
            total_prevalence += p.prevalence;
            profiles.push(TemperamentProfile {
                temperament: t,
                prevalence: p.prevalence,
                traits: p.traits,
                advice: p.advice,
                example_text: p.example,
            });
        }
        if (total_prevalence - 1.0).abs() > PREVALENCE_TOLERANCE {
            return Err(Error::Schema(format!(
                "prevalences sum to {total_prevalence:.4}, expected 1.0 ± {PREVALENCE_TOLERANCE}"
            )));
        }
        for s in &strategies {
            if !s.distractor && !referenced.contains(&s.id) {
                return Err(Error::Schema(format!(
                    "strategy `{}` is neither advised by a profile nor marked as a distractor",
                    s.id
                )));
            }
        }
        if raw.catalog.situations.is_empty() || raw.catalog.settings.is_empty() {
            return Err(Error::Schema(
                "catalog needs at least one situation and one setting".into(),
            ));
        }

        Ok(KnowledgeGraph {
            name: raw.name,
            profiles,
            strategies,
            strategy_index,
            trait_owner,
            catalog: raw.catalog,
            hash,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// SHA-256 of the source text.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn profiles(&self) -> &[TemperamentProfile] {
        &self.profiles
    }

    pub fn strategies(&self) -> &[StrategyNode] {
        &self.strategies
    }

    pub fn profile_of(&self, t: TemperamentType) -> &TemperamentProfile {
        &self.profiles[t.index()]
    }

    pub fn strategy(&self, id: &str) -> Result<&StrategyNode> {
        self.strategy_index
            .get(id)
            .map(|&i| &self.strategies[i])
            .ok_or_else(|| Error::UnknownStrategy(id.to_string()))
    }

    pub fn goodness_of_fit(&self, strategy: &str, t: TemperamentType) -> Result<Fit> {
        let node = self.strategy(strategy)?;
        Ok(if node.fits.contains(&t) {
            Fit::Fits
        } else if node.conflicts.contains(&t) {
            Fit::Conflicts
        } else {
            Fit::Neutral
        })
    }

    /// Advice strategies for `t`, in graph order.
    pub fn strategies_for(&self, t: TemperamentType) -> Vec<&StrategyNode> {
        self.profile_of(t)
            .advice
            .iter()
            .map(|id| &self.strategies[self.strategy_index[id]])
            .collect()
    }

    /// Strategies that conflict with `t`, in graph order.
    pub fn conflicts_for(&self, t: TemperamentType) -> Vec<&StrategyNode> {
        self.strategies
            .iter()
            .filter(|s| s.conflicts.contains(&t))
            .collect()
    }

    /// Strategies that are neither endorsed for nor contraindicated by `t`.
    pub fn neutral_for(&self, t: TemperamentType) -> Vec<&StrategyNode> {
        self.strategies
            .iter()
            .filter(|s| !s.fits.contains(&t) && !s.conflicts.contains(&t))
            .collect()
    }

    pub fn trait_owner(&self, trait_symbol: &str) -> Option<TemperamentType> {
        self.trait_owner.get(trait_symbol).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_prevalences() {
        let g = KnowledgeGraph::bundled();
        let p = |t| g.profile_of(t).prevalence;
        assert_eq!(p(TemperamentType::Easy), 0.40);
        assert_eq!(p(TemperamentType::Difficult), 0.10);
        assert_eq!(p(TemperamentType::SlowToWarmUp), 0.15);
        assert_eq!(p(TemperamentType::Mixed), 0.35);
        let sum: f64 = g.profiles().iter().map(|p| p.prevalence).sum();
        assert!((sum - 1.0).abs() <= 0.01);
    }

    #[test]
    fn goodness_of_fit_verdicts() {
        let g = KnowledgeGraph::bundled();
        use TemperamentType::*;
        assert_eq!(g.goodness_of_fit("gradual_exposure", SlowToWarmUp).unwrap(), Fit::Fits);
        assert_eq!(
            g.goodness_of_fit("force_immediate_socializing", SlowToWarmUp).unwrap(),
            Fit::Conflicts
        );
        assert_eq!(g.goodness_of_fit("predictable_routine", Easy).unwrap(), Fit::Neutral);
        assert!(matches!(
            g.goodness_of_fit("no_such_strategy", Easy),
            Err(Error::UnknownStrategy(_))
        ));
    }

    #[test]
    fn strategies_for_reads_advice_rows() {
        let g = KnowledgeGraph::bundled();
        let ids = |t| -> Vec<String> { g.strategies_for(t).iter().map(|s| s.id.clone()).collect() };
        assert!(ids(TemperamentType::Difficult).contains(&"predictable_routine".to_string()));
        assert!(ids(TemperamentType::Easy).contains(&"attend_subtle_signals".to_string()));
        assert!(ids(TemperamentType::Mixed).contains(&"flexible_strategy_switching".to_string()));
        assert!(ids(TemperamentType::SlowToWarmUp).contains(&"gradual_exposure".to_string()));
    }

    #[test]
    fn advice_is_self_consistent() {
        let g = KnowledgeGraph::bundled();
        for t in TemperamentType::ALL {
            for s in g.strategies_for(t) {
                assert_eq!(g.goodness_of_fit(&s.id, t).unwrap(), Fit::Fits);
            }
            assert!(!g.conflicts_for(t).is_empty(), "{t} needs a conflicting distractor");
        }
    }

    fn without_profile(t: &str) -> String {
        let mut out = String::new();
        let mut skipping = false;
        for line in BUNDLED_GRAPH.lines() {
            if line.starts_with("[[") || line.starts_with('[') {
                skipping = false;
            }
            if line == format!("type = \"{t}\"") {
                // drop the `[[profile]]` header already emitted
                let cut = out.trim_end().rfind("[[profile]]").unwrap();
                out.truncate(cut);
                skipping = true;
                continue;
            }
            if !skipping {
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }

    #[test]
    fn missing_mixed_is_schema_error() {
        let text = without_profile("mixed");
        let err = KnowledgeGraph::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("mixed"), "{err}");
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn prevalence_mismatch_is_schema_error() {
        let text = BUNDLED_GRAPH.replace("prevalence = 0.40", "prevalence = 0.60");
        let err = KnowledgeGraph::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("prevalences sum"), "{err}");
    }

    #[test]
    fn dangling_reference_is_schema_error() {
        let text = BUNDLED_GRAPH.replace(
            "advice = [\"dont_neglect_needs\"",
            "advice = [\"no_such_node\", \"dont_neglect_needs\"",
        );
        let err = KnowledgeGraph::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("no_such_node"), "{err}");
    }

    #[test]
    fn fits_and_conflicts_must_be_disjoint() {
        let text = BUNDLED_GRAPH.replace(
            "conflicts = [\"easy\"]\ndistractor = true",
            "fits = [\"easy\"]\nconflicts = [\"easy\"]\ndistractor = true",
        );
        let err = KnowledgeGraph::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("both fits and conflicts"), "{err}");
    }
}
