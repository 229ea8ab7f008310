use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, TemperamentType};

pub type TokenId = u32;

pub const THINK_OPEN: TokenId = 0;
pub const THINK_CLOSE: TokenId = 1;
pub const ANSWER_OPEN: TokenId = 2;
pub const ANSWER_CLOSE: TokenId = 3;
pub const EOS: TokenId = 4;
pub const PAD: TokenId = 5;

pub const RESERVED: [&str; 6] = ["<think>", "</think>", "<answer>", "</answer>", "<eos>", "<pad>"];

const TEMPERAMENT_PREFIX: &str = "temp:";
const TRAIT_PREFIX: &str = "trait:";
const STRATEGY_PREFIX: &str = "strat:";
const SITUATION_PREFIX: &str = "sit:";
const SETTING_PREFIX: &str = "set:";

/// What a symbol denotes, recovered from its namespace prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind<'a> {
    Reserved,
    Temperament(TemperamentType),
    Trait(&'a str),
    Strategy(&'a str),
    Situation(&'a str),
    Setting(&'a str),
    Other,
}

/// Ordered symbol table. Ids `0..6` are the reserved delimiters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from the reserved delimiters followed by `symbols`.
    pub fn with_symbols<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(symbols.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Input(format!(
                    "vocabulary must start with the reserved delimiters; position {i} should be `{r}`"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary symbol `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// The domain vocabulary induced by a knowledge graph: temperaments,
    /// traits, strategies, situations and settings, in graph order.
    pub fn from_graph(graph: &KnowledgeGraph) -> Self {
        let mut symbols = Vec::new();
        symbols.extend(TemperamentType::ALL.iter().map(|&t| temperament_symbol(t)));
        for p in graph.profiles() {
            symbols.extend(p.traits.iter().map(|t| format!("{TRAIT_PREFIX}{t}")));
        }
        symbols.extend(graph.strategies().iter().map(|s| strategy_symbol(&s.id)));
        let catalog = graph.catalog();
        symbols.extend(catalog.situations.iter().map(|s| format!("{SITUATION_PREFIX}{s}")));
        symbols.extend(catalog.settings.iter().map(|s| format!("{SETTING_PREFIX}{s}")));
        Self::with_symbols(symbols).expect("graph validation guarantees unique symbols")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn kind(&self, id: TokenId) -> TokenKind<'_> {
        let Some(sym) = self.symbol(id) else {
            return TokenKind::Other;
        };
        if (id as usize) < RESERVED.len() {
            return TokenKind::Reserved;
        }
        if let Some(rest) = sym.strip_prefix(TEMPERAMENT_PREFIX) {
            return rest.parse().map_or(TokenKind::Other, TokenKind::Temperament);
        }
        if let Some(rest) = sym.strip_prefix(TRAIT_PREFIX) {
            TokenKind::Trait(rest)
        } else if let Some(rest) = sym.strip_prefix(STRATEGY_PREFIX) {
            TokenKind::Strategy(rest)
        } else if let Some(rest) = sym.strip_prefix(SITUATION_PREFIX) {
            TokenKind::Situation(rest)
        } else if let Some(rest) = sym.strip_prefix(SETTING_PREFIX) {
            TokenKind::Setting(rest)
        } else {
            TokenKind::Other
        }
    }

    pub fn temperament(&self, t: TemperamentType) -> Result<TokenId> {
        self.require(&temperament_symbol(t))
    }

    pub fn trait_token(&self, name: &str) -> Result<TokenId> {
        self.require(&format!("{TRAIT_PREFIX}{name}"))
    }

    pub fn strategy(&self, id: &str) -> Result<TokenId> {
        self.require(&strategy_symbol(id))
    }

    pub fn situation(&self, name: &str) -> Result<TokenId> {
        self.require(&format!("{SITUATION_PREFIX}{name}"))
    }

    pub fn setting(&self, name: &str) -> Result<TokenId> {
        self.require(&format!("{SETTING_PREFIX}{name}"))
    }

    fn require(&self, symbol: &str) -> Result<TokenId> {
        self.id(symbol)
            .ok_or_else(|| Error::Input(format!("symbol `{symbol}` is not in the vocabulary")))
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<TokenId>> {
        symbols.iter().map(|s| self.require(s.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.symbol(i)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Input(format!("token id {i} outside vocabulary")))
            })
            .collect()
    }

    /// SHA-256 over the newline-joined symbol list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

pub fn temperament_symbol(t: TemperamentType) -> String {
    format!("{TEMPERAMENT_PREFIX}{}", t.as_str())
}

pub fn strategy_symbol(id: &str) -> String {
    format!("{STRATEGY_PREFIX}{id}")
}
