//! Run manifest: every artifact a run produced, with its SHA-256.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Seeds;
use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: &str = "tempered-manifest/1";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Sft,
    Grpo,
    Eval,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::GenData => "gen-data",
            Stage::Sft => "sft",
            Stage::Grpo => "grpo",
            Stage::Eval => "eval",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: Stage,
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub path: String,
    pub seed: u64,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub tool_version: String,
    /// First 16 hex digits of the config hash.
    pub run_id: String,
    pub config_hash: String,
    pub graph_hash: String,
    pub vocab_hash: String,
    pub seeds: Seeds,
    /// `sft`, `rl`, `benchmark`.
    pub corpora: BTreeMap<String, CorpusEntry>,
    /// `base`, `sft`, `grpo` final checkpoints.
    pub checkpoints: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(config_hash: &str, graph_hash: &str, vocab_hash: &str, seeds: Seeds) -> Self {
        RunManifest {
            version: MANIFEST_VERSION.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            run_id: config_hash[..16].to_string(),
            config_hash: config_hash.into(),
            graph_hash: graph_hash.into(),
            vocab_hash: vocab_hash.into(),
            seeds,
            corpora: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::persistence(&path, format!("invalid manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                path,
                found: m.version,
                expected: MANIFEST_VERSION.into(),
            });
        }
        Ok(Some(m))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        io::write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    pub fn record(&mut self, stage: Stage, path: &str, sha256: String) {
        self.artifacts.retain(|a| a.path != path);
        self.artifacts.push(Artifact {
            stage,
            path: path.into(),
            sha256,
        });
    }

    pub fn forget(&mut self, path: &str) {
        self.artifacts.retain(|a| a.path != path);
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.artifacts.iter().any(|a| a.stage == stage)
    }

    /// Deletes the files of `stage` and every later stage and drops them from
    /// the manifest, so that a rerun leaves no stale artifacts behind.
    pub fn clear_from(&mut self, dir: &Path, stage: Stage) -> Result<()> {
        for a in self.artifacts.iter().filter(|a| a.stage >= stage) {
            let p = dir.join(&a.path);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        self.artifacts.retain(|a| a.stage < stage);
        if stage <= Stage::GenData {
            self.corpora.clear();
        }
        let keep: &[&str] = match stage {
            Stage::GenData => &[],
            Stage::Sft => &[],
            Stage::Grpo => &["base", "sft"],
            _ => &["base", "sft", "grpo"],
        };
        self.checkpoints.retain(|k, _| keep.contains(&k.as_str()));
        Ok(())
    }

    /// Checks that every recorded artifact exists with its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            if !p.exists() {
                return Err(Error::persistence(&p, format!("{} artifact is missing", a.stage)));
            }
            let actual = io::file_sha256(&p)?;
            if actual != a.sha256 {
                return Err(Error::persistence(
                    &p,
                    format!("hash mismatch: manifest {} vs file {actual}", a.sha256),
                ));
            }
        }
        Ok(())
    }

    /// Finds the artifact at `path` written by `stage`, verifying its hash.
    pub fn require(&self, dir: &Path, stage: Stage, path: &str, what: &str) -> Result<()> {
        let Some(a) = self.artifacts.iter().find(|a| a.path == path && a.stage == stage) else {
            return Err(Error::MissingStage(format!(
                "{what} required: run `tempered {stage}` first"
            )));
        };
        let p = dir.join(path);
        if !p.exists() || io::file_sha256(&p)? != a.sha256 {
            return Err(Error::MissingStage(format!(
                "{what} at {} is missing or modified: rerun `tempered {stage}`",
                p.display()
            )));
        }
        Ok(())
    }
}
