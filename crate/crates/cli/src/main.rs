use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tempered_core::config::{Config, Scale};
use tempered_core::kg::KnowledgeGraph;
use tempered_core::pipeline::{score_ratings, score_responses, Pipeline};
use tempered_core::toy_lm::Vocab;
use tempered_core::Error;

/// Temperament-aware SFT + GRPO pipeline on a symbolic caregiving domain.
///
/// Any config key can be overridden from the environment as
/// TEMPERED_<SECTION>__<KEY>, e.g. TEMPERED_SFT__LEARNING_RATE=0.5.
/// Precedence: flags > environment > --config file > --scale preset.
#[derive(Debug, Parser)]
#[command(name = "tempered", version)]
struct Cli {
    /// TOML file layered over the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed; every stream (corpora, init, training, eval) derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Preset to start from.
    #[arg(long, global = true, value_parser = ["paper", "desk"])]
    scale: Option<String>,

    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Run directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "tempered-run")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the SFT, RL and benchmark corpora.
    GenData,
    /// Supervised fine-tuning from a fresh base policy.
    Sft,
    /// GRPO from the SFT checkpoint.
    Grpo,
    /// Benchmark accuracy and held-out reward for base, SFT and SFT+GRPO.
    Eval,
    /// Ablation and rating tables.
    Report,
    /// gen-data, sft, grpo, eval and report in sequence.
    RunAll,
    /// Score responses against a corpus, or aggregate a ratings file.
    Score {
        /// Corpus (JSONL) holding the scenarios.
        #[arg(long, requires = "responses", conflicts_with = "ratings")]
        corpus: Option<PathBuf>,
        /// JSONL lines of {"id": ..., "response": [tokens]}.
        #[arg(long, requires = "corpus")]
        responses: Option<PathBuf>,
        /// Ratings CSV (model,item,rater,dimension,score).
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> anyhow::Result<Config> {
    let scale = cli.scale.as_deref().map(str::parse::<Scale>).transpose()?;
    let mut config = Config::resolve(scale, cli.config.as_deref(), std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
    }
    Ok(config)
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let config = resolve_config(cli)?;
    if let Command::Score {
        corpus,
        responses,
        ratings,
    } = &cli.command
    {
        return score(&config, corpus.as_deref(), responses.as_deref(), ratings.as_deref());
    }
    let pipeline = Pipeline::new(config, &cli.out)?;
    match cli.command {
        Command::GenData => pipeline.gen_data()?,
        Command::Sft => pipeline.sft()?,
        Command::Grpo => pipeline.grpo()?,
        Command::Eval => {
            for m in pipeline.eval()?.models {
                println!(
                    "{:<9} accuracy {:.4}  held-out reward {:.4}  KL to SFT {:.4}",
                    m.benchmark.model_tag, m.benchmark.accuracy, m.held_out.mean_reward, m.held_out.mean_kl_to_ref
                );
            }
        }
        Command::Report => print!("{}", pipeline.report()?),
        Command::RunAll => print!("{}", pipeline.run_all()?),
        Command::Score { .. } => unreachable!(),
    }
    Ok(())
}

fn score(config: &Config, corpus: Option<&Path>, responses: Option<&Path>, ratings: Option<&Path>) -> anyhow::Result<()> {
    match (corpus, responses, ratings) {
        (Some(c), Some(r), None) => {
            let graph = match &config.graph.path {
                Some(p) => KnowledgeGraph::load(p)?,
                None => KnowledgeGraph::bundled(),
            };
            let vocab = Vocab::from_graph(&graph);
            print!("{}", score_responses(&graph, &vocab, &read(c)?, &read(r)?)?);
        }
        (None, None, Some(path)) => {
            let file = std::fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
            let table = score_ratings(file)?;
            print!("{}", table.to_csv());
            eprint!("{}", table.to_text());
        }
        _ => anyhow::bail!(Error::Input("score needs --corpus and --responses, or --ratings".into())),
    }
    Ok(())
}

/// 2 for configuration and input problems, 3 for a missing prerequisite
/// stage, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Input(_) | Error::Schema(_)) => 2,
        Some(Error::MissingStage(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| run(&cli)),
        Err(e) => Err(e.into()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
