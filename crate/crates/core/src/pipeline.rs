//! Stage orchestration over a run directory.
//!
//! ```text
//! <out>/config.toml            resolved configuration
//! <out>/manifest.json          artifacts and hashes
//! <out>/data/{sft,rl,benchmark}.jsonl
//! <out>/checkpoints/{base,sft,grpo}.ckpt, <stage>-step-NNNNNN.ckpt
//! <out>/logs/{sft,grpo}.csv
//! <out>/eval/benchmark_{base,sft,sft_grpo}.csv, eval/summary.json
//! <out>/reports/ablation.{csv,txt}, ratings.csv, ratings_table.{csv,txt}
//! ```
//!
//! Each stage checks its prerequisites against the manifest, removes its own
//! and later stages' previous outputs, and records what it writes. No file
//! contains timestamps or thread-dependent values, so reruns are
//! byte-identical for any worker count.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_report, aggregate_ratings, held_out_stats, read_ratings, run_benchmark, synthetic_ratings,
    write_ratings, BenchmarkResult, HeldOutStats, RatingTable,
};
use crate::grpo::{encode_prompts, train_grpo};
use crate::io::{self, CorpusRecord};
use crate::kg::KnowledgeGraph;
use crate::manifest::{CorpusEntry, RunManifest, Stage};
use crate::rewards::RewardModel;
use crate::scenario::{
    generate_benchmark, generate_rl_scenarios, generate_sft_dataset, McQuestion, Scenario, SftExample,
    TrainingCorpora,
};
use crate::sft::{encode_examples, train_sft};
use crate::toy_lm::{load_checkpoint, save_checkpoint, PolicyParams, TokenId, Vocab};

pub const MODEL_TAGS: [&str; 3] = ["base", "sft", "sft+grpo"];

const SFT_CORPUS: &str = "data/sft.jsonl";
const RL_CORPUS: &str = "data/rl.jsonl";
const BENCHMARK: &str = "data/benchmark.jsonl";
const CONFIG_FILE: &str = "config.toml";
const SUMMARY: &str = "eval/summary.json";

fn checkpoint_path(name: &str) -> String {
    format!("checkpoints/{name}.ckpt")
}

fn file_stem(tag: &str) -> String {
    tag.replace('+', "_")
}

/// One model's evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub benchmark: BenchmarkResult,
    pub held_out: HeldOutStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mc_mode: crate::eval::McMode,
    pub models: Vec<ModelEval>,
}

pub struct Pipeline {
    config: Config,
    dir: PathBuf,
    graph: KnowledgeGraph,
    vocab: Vocab,
}

impl Pipeline {
    pub fn new(config: Config, dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let graph = match &config.graph.path {
            Some(p) => KnowledgeGraph::load(p)?,
            None => KnowledgeGraph::bundled(),
        };
        let vocab = Vocab::from_graph(&graph);
        Ok(Pipeline {
            config,
            dir: dir.into(),
            graph,
            vocab,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn fresh_manifest(&self) -> RunManifest {
        RunManifest::new(&self.config.hash(), self.graph.hash(), &self.vocab.hash(), self.config.seeds())
    }

    /// Manifest of a run started with the same configuration.
    fn manifest(&self, next: Stage) -> Result<RunManifest> {
        let m = RunManifest::load(&self.dir)?.ok_or_else(|| {
            Error::MissingStage(format!(
                "no run manifest in {}: run `tempered gen-data` before `tempered {next}`",
                self.dir.display()
            ))
        })?;
        if m.config_hash != self.config.hash() {
            return Err(Error::Config(format!(
                "{} was produced with a different configuration (hash {}); rerun from `tempered gen-data` or use a new --out",
                self.dir.display(),
                &m.config_hash[..16]
            )));
        }
        Ok(m)
    }

    fn write(&self, m: &mut RunManifest, stage: Stage, rel: &str, bytes: &[u8]) -> Result<String> {
        let sha = io::write_file(&self.dir.join(rel), bytes)?;
        m.record(stage, rel, sha.clone());
        Ok(sha)
    }

    fn save_ckpt(&self, m: &mut RunManifest, stage: Stage, rel: &str, params: &PolicyParams) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_checkpoint(params, &self.vocab.hash(), &path)?;
        m.record(stage, rel, io::file_sha256(&path)?);
        Ok(())
    }

    fn load_ckpt(&self, rel: &str) -> Result<PolicyParams> {
        let path = self.dir.join(rel);
        let ck = load_checkpoint(&path)?;
        if ck.vocab_hash != self.vocab.hash() {
            return Err(Error::persistence(&path, "checkpoint was trained on a different vocabulary"));
        }
        Ok(ck.params)
    }

    fn read_corpus(&self, rel: &str) -> Result<Vec<CorpusRecord>> {
        io::read_jsonl(&self.dir.join(rel))
    }

    pub fn gen_data(&self) -> Result<()> {
        if let Some(mut old) = RunManifest::load(&self.dir)? {
            old.clear_from(&self.dir, Stage::GenData)?;
        }
        let mut m = self.fresh_manifest();
        let seeds = self.config.seeds();
        let d = &self.config.data;
        let sft = generate_sft_dataset(&self.graph, d.sft_size, seeds.sft_corpus)?;
        let rl = generate_rl_scenarios(&self.graph, d.rl_size, seeds.rl_corpus)?;
        let training = TrainingCorpora::new(
            &[seeds.sft_corpus, seeds.rl_corpus],
            sft.iter().map(|e| &e.scenario).chain(&rl),
        );
        let bench = generate_benchmark(&self.graph, d.benchmark_size, seeds.benchmark, &training)?;

        self.write(&mut m, Stage::GenData, CONFIG_FILE, self.config.to_toml().as_bytes())?;
        for (name, rel, seed, text, n) in [
            ("sft", SFT_CORPUS, seeds.sft_corpus, io::to_jsonl(&sft), sft.len()),
            ("rl", RL_CORPUS, seeds.rl_corpus, io::to_jsonl(&rl), rl.len()),
            ("benchmark", BENCHMARK, seeds.benchmark, io::to_jsonl(&bench), bench.len()),
        ] {
            let sha = self.write(&mut m, Stage::GenData, rel, text.as_bytes())?;
            m.corpora.insert(
                name.into(),
                CorpusEntry {
                    path: rel.into(),
                    seed,
                    records: n,
                    sha256: sha,
                },
            );
        }
        m.save(&self.dir)?;
        info!("gen-data: {} SFT / {} RL / {} benchmark records", sft.len(), rl.len(), bench.len());
        Ok(())
    }

    /// Intermediate checkpoint sink honouring `save_total_limit`.
    fn step_saver<'a>(
        &'a self,
        m: &'a mut RunManifest,
        stage: Stage,
        limit: Option<usize>,
    ) -> impl FnMut(usize, &PolicyParams) -> Result<()> + 'a {
        let mut kept: VecDeque<String> = VecDeque::new();
        move |step, params| {
            let rel = checkpoint_path(&format!("{stage}-step-{step:06}"));
            self.save_ckpt(m, stage, &rel, params)?;
            kept.push_back(rel);
            if let Some(limit) = limit {
                while kept.len() > limit {
                    let old = kept.pop_front().expect("non-empty");
                    let p = self.dir.join(&old);
                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                    m.forget(&old);
                }
            }
            Ok(())
        }
    }

    pub fn sft(&self) -> Result<()> {
        let mut m = self.manifest(Stage::Sft)?;
        m.require(&self.dir, Stage::GenData, SFT_CORPUS, "SFT corpus")?;
        m.clear_from(&self.dir, Stage::Sft)?;
        self.config.warn_unsupported();
        let examples: Vec<SftExample> = self
            .read_corpus(SFT_CORPUS)?
            .into_iter()
            .map(SftExample::try_from)
            .collect::<Result<_>>()?;
        let encoded = encode_examples(&self.vocab, &examples)?;
        let max_len = self.config.sft.max_sequence_length;
        if let Some(e) = encoded.iter().find(|e| e.prompt.len() + e.target.len() > max_len) {
            return Err(Error::Config(format!(
                "an SFT example has {} tokens, above sft.max_sequence_length {max_len}",
                e.prompt.len() + e.target.len()
            )));
        }
        let base = PolicyParams::init(self.vocab.len(), self.config.vocab.window, self.config.seeds().init);
        self.save_ckpt(&mut m, Stage::Sft, &checkpoint_path("base"), &base)?;
        m.checkpoints.insert("base".into(), checkpoint_path("base"));

        let cfg = self.config.sft_config();
        let limit = self.config.sft.save_total_limit;
        let (trained, log) = {
            let saver = self.step_saver(&mut m, Stage::Sft, limit);
            train_sft(&base, &encoded, &cfg, saver)?
        };
        self.save_ckpt(&mut m, Stage::Sft, &checkpoint_path("sft"), &trained)?;
        m.checkpoints.insert("sft".into(), checkpoint_path("sft"));
        self.write(&mut m, Stage::Sft, "logs/sft.csv", &to_csv(&log)?)?;
        m.save(&self.dir)?;
        if let (Some(first), Some(last)) = (log.first(), log.last()) {
            info!("sft: {} steps, loss {:.4} -> {:.4}", last.step, first.loss, last.loss);
        }
        Ok(())
    }

    pub fn grpo(&self) -> Result<()> {
        let mut m = self.manifest(Stage::Grpo)?;
        m.require(&self.dir, Stage::Sft, &checkpoint_path("sft"), "SFT checkpoint")?;
        m.require(&self.dir, Stage::GenData, RL_CORPUS, "RL corpus")?;
        m.clear_from(&self.dir, Stage::Grpo)?;
        let sft = self.load_ckpt(&checkpoint_path("sft"))?;
        let scenarios: Vec<Scenario> = self.read_corpus(RL_CORPUS)?.iter().map(CorpusRecord::scenario).collect();
        let cfg = self.config.grpo_config();
        let prompts = encode_prompts(&self.vocab, &scenarios, cfg.max_prompt_len)?;
        let rewards = RewardModel::new(&self.graph, &self.vocab);
        let save_steps = self.config.grpo.save_steps;
        let limit = self.config.grpo.save_total_limit;
        let (trained, log) = {
            let mut saver = self.step_saver(&mut m, Stage::Grpo, limit);
            train_grpo(&sft, &prompts, &rewards, &cfg, |metrics, params| {
                if save_steps > 0 && metrics.step % save_steps == 0 {
                    saver(metrics.step, params)?;
                }
                Ok(())
            })?
        };
        let every = self.config.grpo.logging_steps.max(1);
        let rows: Vec<_> = log
            .iter()
            .filter(|r| r.step % every == 0 || r.step == log.len())
            .collect();
        self.save_ckpt(&mut m, Stage::Grpo, &checkpoint_path("grpo"), &trained)?;
        m.checkpoints.insert("grpo".into(), checkpoint_path("grpo"));
        self.write(&mut m, Stage::Grpo, "logs/grpo.csv", &to_csv(&rows)?)?;
        m.save(&self.dir)?;
        if let (Some(first), Some(last)) = (log.first(), log.last()) {
            info!(
                "grpo: {} steps, mean reward {:.3} -> {:.3}, kl {:.4}",
                last.step, first.mean_reward, last.mean_reward, last.kl
            );
        }
        Ok(())
    }

    fn benchmark(&self) -> Result<Vec<McQuestion>> {
        self.read_corpus(BENCHMARK)?
            .into_iter()
            .map(McQuestion::try_from)
            .collect()
    }

    pub fn eval(&self) -> Result<EvalSummary> {
        let mut m = self.manifest(Stage::Eval)?;
        m.require(&self.dir, Stage::Sft, &checkpoint_path("base"), "base checkpoint")?;
        m.require(&self.dir, Stage::Sft, &checkpoint_path("sft"), "SFT checkpoint")?;
        m.require(&self.dir, Stage::Grpo, &checkpoint_path("grpo"), "GRPO checkpoint")?;
        m.require(&self.dir, Stage::GenData, BENCHMARK, "benchmark")?;
        m.clear_from(&self.dir, Stage::Eval)?;
        let bench = self.benchmark()?;
        let held: Vec<Scenario> = bench.iter().map(|q| q.scenario.clone()).collect();
        let rewards = RewardModel::new(&self.graph, &self.vocab);
        let reference = self.load_ckpt(&checkpoint_path("sft"))?;
        let mut models = Vec::new();
        for (tag, ckpt) in MODEL_TAGS.iter().zip(["base", "sft", "grpo"]) {
            let params = self.load_ckpt(&checkpoint_path(ckpt))?;
            let benchmark = run_benchmark(&params, &self.vocab, &bench, tag, self.config.eval.mc_mode)?;
            self.write(
                &mut m,
                Stage::Eval,
                &format!("eval/benchmark_{}.csv", file_stem(tag)),
                benchmark.to_csv().as_bytes(),
            )?;
            let held_out = held_out_stats(
                &params,
                &reference,
                &rewards,
                &self.vocab,
                &held,
                self.config.eval.reward_samples,
                self.config.grpo.max_completion_length,
                self.config.seeds().eval,
            )?;
            info!(
                "eval {tag}: accuracy {:.4}, held-out reward {:.4}",
                benchmark.accuracy, held_out.mean_reward
            );
            models.push(ModelEval { benchmark, held_out });
        }
        let summary = EvalSummary {
            mc_mode: self.config.eval.mc_mode,
            models,
        };
        let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        text.push('\n');
        self.write(&mut m, Stage::Eval, SUMMARY, text.as_bytes())?;
        m.save(&self.dir)?;
        Ok(summary)
    }

    pub fn report(&self) -> Result<String> {
        let mut m = self.manifest(Stage::Report)?;
        m.require(&self.dir, Stage::Eval, SUMMARY, "evaluation summary")?;
        m.clear_from(&self.dir, Stage::Report)?;
        let path = self.dir.join(SUMMARY);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let summary: EvalSummary =
            serde_json::from_str(&text).map_err(|e| Error::persistence(&path, e.to_string()))?;
        let [base, sft, grpo] = &summary.models[..] else {
            return Err(Error::persistence(&path, "expected three evaluated models"));
        };
        let ablation = ablation_report(&base.benchmark, &sft.benchmark, &grpo.benchmark)?;
        self.write(&mut m, Stage::Report, "reports/ablation.csv", ablation.to_csv().as_bytes())?;
        self.write(&mut m, Stage::Report, "reports/ablation.txt", ablation.to_text().as_bytes())?;

        let ratings = match &self.config.eval.ratings_path {
            Some(p) => read_ratings(std::fs::File::open(p).map_err(|e| Error::io(p, e))?)?,
            None => {
                let bench = self.benchmark()?;
                let held: Vec<Scenario> = bench.into_iter().map(|q| q.scenario).collect();
                let mut all = Vec::new();
                for (tag, ckpt) in MODEL_TAGS.iter().zip(["base", "sft", "grpo"]) {
                    let params = self.load_ckpt(&checkpoint_path(ckpt))?;
                    all.extend(synthetic_ratings(
                        &self.graph,
                        &self.vocab,
                        &params,
                        tag,
                        &held,
                        self.config.eval.synthetic_raters,
                        self.config.seeds().eval,
                    )?);
                }
                all
            }
        };
        self.write(&mut m, Stage::Report, "reports/ratings.csv", write_ratings(&ratings).as_bytes())?;
        let table = aggregate_ratings(&ratings)?;
        self.write(&mut m, Stage::Report, "reports/ratings_table.csv", table.to_csv().as_bytes())?;
        self.write(&mut m, Stage::Report, "reports/ratings_table.txt", table.to_text().as_bytes())?;
        m.save(&self.dir)?;

        let mut out = ablation.to_text();
        out.push('\n');
        out.push_str(&table.to_text());
        out.push_str(&format!(
            "\nheld-out mean reward: sft {:.4}, sft+grpo {:.4}; KL(sft+grpo || sft) {:.4}\n",
            sft.held_out.mean_reward, grpo.held_out.mean_reward, grpo.held_out.mean_kl_to_ref
        ));
        Ok(out)
    }

    /// gen-data, sft, grpo, eval and report in sequence; returns the report text.
    pub fn run_all(&self) -> Result<String> {
        self.gen_data()?;
        self.sft()?;
        self.grpo()?;
        self.eval()?;
        let report = self.report()?;
        RunManifest::load(&self.dir)?
            .expect("just written")
            .verify(&self.dir)?;
        Ok(report)
    }
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))
}

/// One line of a response file: the scenario id and its response tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub id: String,
    pub response: Vec<String>,
}

/// Scores each response against the corpus scenario with the same id.
/// Rows follow the response file order.
pub fn score_responses(graph: &KnowledgeGraph, vocab: &Vocab, corpus: &str, responses: &str) -> Result<String> {
    let scenarios: std::collections::HashMap<String, Scenario> = io::parse_jsonl(corpus)?
        .iter()
        .map(|r| (r.id.clone(), r.scenario()))
        .collect();
    let rewards = RewardModel::new(graph, vocab);
    let mut rows = String::from("id,r_fmt,r_temp,r_know,total\n");
    for (i, line) in responses.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ResponseRecord =
            serde_json::from_str(line).map_err(|e| Error::Input(format!("response line {}: {e}", i + 1)))?;
        let scenario = scenarios
            .get(&rec.id)
            .ok_or_else(|| Error::Input(format!("response line {}: no corpus record with id `{}`", i + 1, rec.id)))?;
        let tokens: Vec<TokenId> = vocab.encode(&rec.response)?;
        let r = rewards.composite(scenario, &tokens);
        rows.push_str(&format!("{},{},{},{},{}\n", rec.id, r.r_fmt, r.r_temp, r.r_know, r.total));
    }
    Ok(rows)
}

/// Aggregates a ratings CSV into the mean-rating table.
pub fn score_ratings(reader: impl std::io::Read) -> Result<RatingTable> {
    aggregate_ratings(&read_ratings(reader)?)
}
