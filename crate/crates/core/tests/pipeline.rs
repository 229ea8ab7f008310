use std::path::Path;

use tempered_core::config::{Config, Scale};
use tempered_core::manifest::{RunManifest, Stage};
use tempered_core::pipeline::{score_ratings, score_responses, Pipeline};
use tempered_core::Error;

/// A few-second configuration exercising every stage.
fn tiny(seed: u64) -> Config {
    let mut c = Config::preset(Scale::Desk);
    c.run.seed = seed;
    c.data.sft_size = 16;
    c.data.rl_size = 24;
    c.data.benchmark_size = 9;
    c.sft.epochs = 2;
    c.sft.save_steps = 2;
    c.sft.save_total_limit = Some(2);
    c.grpo.epochs = 1;
    c.grpo.global_batch_size = 32;
    c.grpo.save_steps = 2;
    c.eval.reward_samples = 2;
    c
}

fn list(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in walk(dir) {
        out.push(e.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/"));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn stages_in_order_produce_a_verified_manifest_without_orphans() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(3), dir.path()).unwrap();
    let report = p.run_all().unwrap();
    assert!(report.contains("Benchmark accuracy"));
    assert!(report.contains("Mean ratings"));

    let m = RunManifest::load(dir.path()).unwrap().unwrap();
    m.verify(dir.path()).unwrap();
    let mut recorded: Vec<String> = m.artifacts.iter().map(|a| a.path.clone()).collect();
    recorded.push("manifest.json".into());
    recorded.sort();
    assert_eq!(recorded, list(dir.path()), "every file is reachable from the manifest");
    assert_eq!(m.corpora["sft"].records, 16);
    assert_eq!(m.corpora["benchmark"].records, 9);
    assert_eq!(m.checkpoints.len(), 3);
    let sft_steps = m.artifacts.iter().filter(|a| a.path.contains("sft-step-")).count();
    assert_eq!(sft_steps, 2, "save_total_limit keeps the newest two");
}

#[test]
fn grpo_before_sft_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(4), dir.path()).unwrap();
    match p.grpo() {
        Err(Error::MissingStage(msg)) => assert!(msg.contains("gen-data"), "{msg}"),
        other => panic!("expected a missing-stage error, got {other:?}"),
    }
    p.gen_data().unwrap();
    match p.grpo() {
        Err(Error::MissingStage(msg)) => {
            assert!(msg.contains("SFT checkpoint required"), "{msg}");
            assert!(msg.contains("tempered sft"), "{msg}");
        }
        other => panic!("expected a missing-stage error, got {other:?}"),
    }
    assert!(matches!(p.eval(), Err(Error::MissingStage(_))));
    assert!(matches!(p.report(), Err(Error::MissingStage(_))));
}

#[test]
fn rerunning_a_stage_invalidates_later_ones() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(5), dir.path()).unwrap();
    p.run_all().unwrap();
    p.sft().unwrap();
    let m = RunManifest::load(dir.path()).unwrap().unwrap();
    assert!(m.has_stage(Stage::Sft));
    assert!(!m.has_stage(Stage::Grpo) && !m.has_stage(Stage::Eval) && !m.has_stage(Stage::Report));
    assert!(!dir.path().join("checkpoints/grpo.ckpt").exists());
    assert!(!dir.path().join("reports/ablation.csv").exists());
    m.verify(dir.path()).unwrap();
}

#[test]
fn a_different_config_is_refused_mid_run() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(tiny(6), dir.path()).unwrap().gen_data().unwrap();
    let other = Pipeline::new(tiny(7), dir.path()).unwrap();
    assert!(matches!(other.sft(), Err(Error::Config(_))));
    // gen-data starts over and is always allowed
    other.gen_data().unwrap();
    other.sft().unwrap();
}

#[test]
fn tampered_artifacts_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(8), dir.path()).unwrap();
    p.gen_data().unwrap();
    std::fs::write(dir.path().join("data/sft.jsonl"), "").unwrap();
    assert!(matches!(p.sft(), Err(Error::MissingStage(_))));
    assert!(RunManifest::load(dir.path()).unwrap().unwrap().verify(dir.path()).is_err());
}

#[test]
fn score_joins_responses_to_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(9), dir.path()).unwrap();
    p.gen_data().unwrap();
    let corpus = std::fs::read_to_string(dir.path().join("data/sft.jsonl")).unwrap();
    let records = tempered_core::io::parse_jsonl(&corpus).unwrap();
    let gold = &records[0];
    let responses = format!(
        "{}\n{}\n",
        serde_json::json!({"id": gold.id, "response": gold.target.clone().unwrap()}),
        serde_json::json!({"id": records[1].id, "response": ["<think>", "</think>"]}),
    );
    let csv = score_responses(p.graph(), p.vocab(), &corpus, &responses).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,r_fmt,r_temp,r_know,total");
    assert_eq!(lines[1], format!("{},1,1,1,3", gold.id));
    assert_eq!(lines[2], format!("{},0,0,0,0", records[1].id));

    let missing = serde_json::json!({"id": "nope", "response": []}).to_string();
    assert!(matches!(
        score_responses(p.graph(), p.vocab(), &corpus, &missing),
        Err(Error::Input(_))
    ));
}

#[test]
fn ratings_file_aggregates_to_a_table() {
    let text = "model,item,rater,dimension,score\n\
                m,1,a,knowledge,0.6\nm,1,b,knowledge,0.7\nm,1,c,knowledge,0.8\n";
    let t = score_ratings(text.as_bytes()).unwrap();
    assert!((t.rows[0].means[0].unwrap() - 0.7).abs() < 1e-12);
    assert!(matches!(score_ratings("model,item,rater,dimension,score\n".as_bytes()), Err(Error::Input(_))));
}
