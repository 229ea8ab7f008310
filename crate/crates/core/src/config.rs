//! Run configuration: presets, TOML files and environment overrides.
//!
//! Resolution order, later wins: preset for the chosen [`Scale`], config file,
//! `TEMPERED_<SECTION>__<KEY>` environment variables, explicit CLI flags.
//! Every training hyperparameter row of the reference setup appears under its
//! stage section; rows the toy trainer cannot honour (optimizer family,
//! precision, gradient checkpointing, per-device batching) are kept for
//! provenance and reported with a warning when they differ from what runs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::McMode;
use crate::grpo::{GrpoConfig, ReferencePolicy};
use crate::rng;
use crate::sft::SftConfig;

pub const ENV_PREFIX: &str = "TEMPERED_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Corpus sizes and hyperparameters of the reference setup.
    Paper,
    /// Small corpora and toy-tuned learning rates; runs in seconds.
    Desk,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!("unknown scale `{other}` (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub scale: Scale,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSection {
    /// Recency window `k` of the policy's context features.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    /// Knowledge-graph TOML; empty means the bundled graph.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub sft_size: usize,
    pub rl_size: usize,
    pub benchmark_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub batch_size_per_device: usize,
    pub gradient_accumulation: usize,
    /// Examples per optimizer step.
    pub global_batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub max_sequence_length: usize,
    pub optimizer: String,
    pub weight_decay: f64,
    pub lr_scheduler: String,
    pub gradient_checkpointing: bool,
    pub logging_steps: usize,
    pub save_steps: usize,
    /// Intermediate checkpoints kept on disk; absent means all.
    #[serde(default)]
    pub save_total_limit: Option<usize>,
    pub precision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoSection {
    pub batch_size_per_device: usize,
    pub gradient_accumulation: usize,
    /// Completions per outer iteration; divided by `rollout_generations` this
    /// is the number of scenarios rolled out per iteration.
    pub global_batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub max_prompt_length: usize,
    pub max_completion_length: usize,
    pub max_sequence_length: usize,
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub lr_scheduler: String,
    pub logging_steps: usize,
    pub save_steps: usize,
    #[serde(default)]
    pub save_total_limit: Option<usize>,
    pub max_grad_norm: f64,
    pub temperature: f64,
    pub rollout_generations: usize,
    pub kl_coefficient: f64,
    pub precision: String,
    pub clip_epsilon: f64,
    pub updates_per_rollout: usize,
    pub reference_policy: ReferencePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub mc_mode: McMode,
    /// Temperature-1 samples per held-out scenario when estimating mean reward.
    pub reward_samples: usize,
    /// Synthetic raters used when no ratings file is supplied.
    pub synthetic_raters: usize,
    /// Ratings CSV (`model,item,rater,dimension,score`) to aggregate instead.
    #[serde(default)]
    pub ratings_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub vocab: VocabSection,
    pub graph: GraphSection,
    pub data: DataSection,
    pub sft: SftSection,
    pub grpo: GrpoSection,
    pub eval: EvalSection,
}

/// Seeds for every random stream of a run, derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub sft_corpus: u64,
    pub rl_corpus: u64,
    pub benchmark: u64,
    pub init: u64,
    pub sft: u64,
    pub grpo: u64,
    pub eval: u64,
}

impl Config {
    pub fn preset(scale: Scale) -> Config {
        match scale {
            Scale::Paper => Config {
                run: RunSection { scale, seed: 7 },
                vocab: VocabSection { window: 3 },
                graph: GraphSection { path: None },
                data: DataSection {
                    sft_size: 1215,
                    rl_size: 2646,
                    benchmark_size: 200,
                },
                sft: SftSection {
                    batch_size_per_device: 2,
                    gradient_accumulation: 2,
                    global_batch_size: 32,
                    epochs: 5,
                    learning_rate: 2.0e-5,
                    max_sequence_length: 1024,
                    optimizer: "adamw".into(),
                    weight_decay: 0.01,
                    lr_scheduler: "cosine".into(),
                    gradient_checkpointing: true,
                    logging_steps: 10,
                    save_steps: 100,
                    save_total_limit: Some(3),
                    precision: "bfloat16".into(),
                },
                grpo: GrpoSection {
                    batch_size_per_device: 4,
                    gradient_accumulation: 8,
                    global_batch_size: 256,
                    epochs: 3,
                    learning_rate: 1.0e-6,
                    warmup_ratio: 0.03,
                    max_prompt_length: 512,
                    max_completion_length: 1024,
                    max_sequence_length: 1024,
                    optimizer: "adamw".into(),
                    adam_beta1: 0.9,
                    adam_beta2: 0.99,
                    weight_decay: 0.1,
                    lr_scheduler: "cosine".into(),
                    logging_steps: 10,
                    save_steps: 20,
                    save_total_limit: None,
                    max_grad_norm: 0.5,
                    temperature: 1.0,
                    rollout_generations: 4,
                    kl_coefficient: 0.005,
                    precision: "bfloat16".into(),
                    clip_epsilon: 0.2,
                    updates_per_rollout: 1,
                    reference_policy: ReferencePolicy::SftCheckpoint,
                },
                eval: EvalSection {
                    mc_mode: McMode::LogLikelihood,
                    reward_samples: 4,
                    synthetic_raters: 3,
                    ratings_path: None,
                },
            },
            Scale::Desk => {
                let paper = Config::preset(Scale::Paper);
                Config {
                    run: RunSection { scale, seed: 1 },
                    data: DataSection {
                        sft_size: 120,
                        rl_size: 260,
                        benchmark_size: 60,
                    },
                    sft: SftSection {
                        batch_size_per_device: 8,
                        gradient_accumulation: 1,
                        global_batch_size: 8,
                        epochs: 10,
                        learning_rate: 20.0,
                        max_sequence_length: 32,
                        optimizer: "sgd".into(),
                        weight_decay: 0.0,
                        gradient_checkpointing: false,
                        precision: "float64".into(),
                        ..paper.sft
                    },
                    grpo: GrpoSection {
                        batch_size_per_device: 4,
                        gradient_accumulation: 16,
                        global_batch_size: 64,
                        epochs: 50,
                        learning_rate: 1.0,
                        max_prompt_length: 16,
                        max_completion_length: 16,
                        max_sequence_length: 32,
                        optimizer: "sgd".into(),
                        weight_decay: 0.0,
                        save_total_limit: Some(3),
                        precision: "float64".into(),
                        updates_per_rollout: 2,
                        // steps here are ~1e6x larger than the paper preset's, so the pull back
                        // toward the SFT policy has to be much stronger to avoid mode collapse
                        kl_coefficient: 0.5,
                        ..paper.grpo
                    },
                    eval: EvalSection {
                        reward_samples: 8,
                        ..paper.eval
                    },
                    ..paper
                }
            }
        }
    }

    /// Preset, then `file`, then environment overrides. The scale is taken
    /// from `scale` if given, else from the file's `run.scale`, else desk.
    pub fn resolve(
        scale: Option<Scale>,
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Config> {
        let file_table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let value: toml::Table = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Some(value)
            }
            None => None,
        };
        let env_pairs: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        let file_scale = file_table
            .as_ref()
            .and_then(|t| t.get("run"))
            .and_then(|r| r.get("scale"))
            .and_then(|s| s.as_str())
            .map(Scale::from_str)
            .transpose()?;
        let env_scale = env_pairs
            .iter()
            .find(|(k, _)| k == "TEMPERED_RUN__SCALE")
            .map(|(_, v)| Scale::from_str(v))
            .transpose()?;
        let scale = scale.or(env_scale).or(file_scale).unwrap_or(Scale::Desk);

        let mut value = toml::Value::try_from(Config::preset(scale))
            .map_err(|e| Error::Config(format!("preset serialization: {e}")))?;
        if let Some(t) = file_table {
            merge(&mut value, toml::Value::Table(t));
        }
        for (key, raw) in &env_pairs {
            apply_env(&mut value, key, raw)?;
        }
        set(&mut value, &["run", "scale"], toml::Value::String(scale.to_string()));
        let config: Config = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.window == 0 {
            return Err(Error::Config("vocab.window must be at least 1".into()));
        }
        if self.data.sft_size == 0 || self.data.rl_size == 0 || self.data.benchmark_size == 0 {
            return Err(Error::Config("corpus sizes must be at least 1".into()));
        }
        if !self.grpo.global_batch_size.is_multiple_of(self.grpo.rollout_generations.max(1)) {
            return Err(Error::Config(format!(
                "grpo.global_batch_size {} is not a multiple of rollout_generations {}",
                self.grpo.global_batch_size, self.grpo.rollout_generations
            )));
        }
        if self.sft.lr_scheduler != "cosine" || self.grpo.lr_scheduler != "cosine" {
            return Err(Error::Config("only the cosine lr_scheduler is implemented".into()));
        }
        if self.eval.reward_samples == 0 {
            return Err(Error::Config("eval.reward_samples must be at least 1".into()));
        }
        self.sft_config().validate()?;
        self.grpo_config().validate()
    }

    /// Logs the provenance rows that the toy trainer does not honour.
    pub fn warn_unsupported(&self) {
        for (stage, optimizer, precision) in [
            ("sft", &self.sft.optimizer, &self.sft.precision),
            ("grpo", &self.grpo.optimizer, &self.grpo.precision),
        ] {
            if optimizer != "sgd" {
                warn!("{stage}.optimizer = {optimizer} is recorded only; updates use plain gradient ascent");
            }
            if precision != "float64" {
                warn!("{stage}.precision = {precision} is recorded only; computation is float64");
            }
        }
    }

    pub fn seeds(&self) -> Seeds {
        let s = |label: &str| rng::derive_seed(self.run.seed, &[rng::label_hash(label)]);
        Seeds {
            sft_corpus: s("sft-corpus"),
            rl_corpus: s("rl-corpus"),
            benchmark: s("benchmark"),
            init: s("init"),
            sft: s("sft"),
            grpo: s("grpo"),
            eval: s("eval"),
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            learning_rate: self.sft.learning_rate,
            epochs: self.sft.epochs,
            batch_size: self.sft.global_batch_size,
            weight_decay: self.sft.weight_decay,
            logging_steps: self.sft.logging_steps,
            save_steps: self.sft.save_steps,
            seed: self.seeds().sft,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.grpo.rollout_generations,
            clip_epsilon: self.grpo.clip_epsilon,
            kl_coefficient: self.grpo.kl_coefficient,
            temperature: self.grpo.temperature,
            learning_rate: self.grpo.learning_rate,
            epochs: self.grpo.epochs,
            scenarios_per_step: (self.grpo.global_batch_size / self.grpo.rollout_generations.max(1)).max(1),
            updates_per_rollout: self.grpo.updates_per_rollout,
            max_prompt_len: self.grpo.max_prompt_length,
            max_completion_len: self.grpo.max_completion_length,
            max_grad_norm: self.grpo.max_grad_norm,
            warmup_ratio: self.grpo.warmup_ratio,
            weight_decay: self.grpo.weight_decay,
            reference_policy: self.grpo.reference_policy,
            seed: self.seeds().grpo,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set(root: &mut toml::Value, path: &[&str], v: toml::Value) {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let table = match cur {
            toml::Value::Table(t) => t,
            other => {
                *other = toml::Value::Table(toml::Table::new());
                other.as_table_mut().expect("just created")
            }
        };
        if i + 1 == path.len() {
            table.insert(key.to_string(), v);
            return;
        }
        cur = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
}

/// `TEMPERED_SFT__LEARNING_RATE=0.1` sets `sft.learning_rate = 0.1`. Values
/// are parsed as TOML scalars, falling back to a plain string.
fn apply_env(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let rest = &key[ENV_PREFIX.len()..];
    let path: Vec<String> = rest.split("__").map(|p| p.to_ascii_lowercase()).collect();
    if path.len() != 2 || path.iter().any(String::is_empty) {
        return Err(Error::Config(format!(
            "environment override `{key}` must look like {ENV_PREFIX}<SECTION>__<KEY>"
        )));
    }
    let exists = root
        .get(&path[0])
        .and_then(|s| s.as_table())
        .is_some_and(|t| t.contains_key(&path[1]) || matches!(path[1].as_str(), "path" | "ratings_path" | "save_total_limit"));
    if !exists {
        return Err(Error::Config(format!("environment override `{key}` names no config key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let refs: Vec<&str> = path.iter().map(String::as_str).collect();
    set(root, &refs, value);
    Ok(())
}
