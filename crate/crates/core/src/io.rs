//! Line-delimited JSON corpora and small file helpers.
//!
//! Every corpus record carries the scenario fields; SFT records add `target`,
//! benchmark records add `options` and `correct_index`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::TemperamentType;
use crate::scenario::{McQuestion, Scenario, SftExample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub temperament: TemperamentType,
    pub cues: Vec<String>,
    pub query: Vec<String>,
    pub reference_strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_index: Option<usize>,
}

impl CorpusRecord {
    fn base(s: &Scenario) -> Self {
        CorpusRecord {
            id: s.id.clone(),
            temperament: s.temperament,
            cues: s.cues.clone(),
            query: s.query.clone(),
            reference_strategy: s.reference_strategy.clone(),
            target: None,
            options: None,
            correct_index: None,
        }
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            id: self.id.clone(),
            temperament: self.temperament,
            cues: self.cues.clone(),
            query: self.query.clone(),
            reference_strategy: self.reference_strategy.clone(),
        }
    }
}

impl From<&Scenario> for CorpusRecord {
    fn from(s: &Scenario) -> Self {
        CorpusRecord::base(s)
    }
}

impl From<&SftExample> for CorpusRecord {
    fn from(e: &SftExample) -> Self {
        CorpusRecord {
            target: Some(e.target_response.clone()),
            ..CorpusRecord::base(&e.scenario)
        }
    }
}

impl From<&McQuestion> for CorpusRecord {
    fn from(q: &McQuestion) -> Self {
        CorpusRecord {
            options: Some(q.options.clone()),
            correct_index: Some(q.correct_index),
            ..CorpusRecord::base(&q.scenario)
        }
    }
}

impl TryFrom<CorpusRecord> for SftExample {
    type Error = Error;

    fn try_from(r: CorpusRecord) -> Result<Self> {
        let target = r
            .target
            .clone()
            .ok_or_else(|| Error::Input(format!("SFT record {} has no target", r.id)))?;
        Ok(SftExample {
            scenario: r.scenario(),
            target_response: target,
        })
    }
}

impl TryFrom<CorpusRecord> for McQuestion {
    type Error = Error;

    fn try_from(r: CorpusRecord) -> Result<Self> {
        match (&r.options, r.correct_index) {
            (Some(options), Some(correct_index)) if options.len() == 3 && correct_index < 3 => Ok(McQuestion {
                scenario: r.scenario(),
                options: options.clone(),
                correct_index,
            }),
            _ => Err(Error::Input(format!(
                "benchmark record {} needs 3 options and a correct_index below 3",
                r.id
            ))),
        }
    }
}

pub fn to_jsonl<'a, T: 'a>(items: impl IntoIterator<Item = &'a T>) -> String
where
    CorpusRecord: From<&'a T>,
{
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&CorpusRecord::from(item)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<CorpusRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Input(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Writes `bytes`, creating parent directories, and returns their SHA-256.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}
