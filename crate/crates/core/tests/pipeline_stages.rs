//! Stage dependencies, skip-on-rerun and report contents of the pipeline.

use std::path::Path;

use trialcf_core::fixture::{synthetic_corpus, synthetic_questions};
use trialcf_core::pipeline::{Pipeline, PipelineError, RunConfig, Stage, StageStatus, ALL_STAGES};
use trialcf_core::reward_eval::write_questions;
use trialcf_core::trial_model::Discretization;

const CONFIG: &str = r#"variables = ["condition", "enrollment", "geography", "phase", "sponsor"]

[corpus]
path = "corpus.jsonl"
questions = "questions.jsonl"

[sft]
epochs = 30

[grpo]
iterations = 7
"#;

fn workspace(trials: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic_corpus(trials, 3);
    corpus.save(&dir.path().join("corpus.jsonl"), "v1").unwrap();
    let qs = synthetic_questions(&corpus, &Discretization::default(), 3);
    write_questions(std::fs::File::create(dir.path().join("questions.jsonl")).unwrap(), &qs).unwrap();
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    dir
}

fn open(dir: &Path, overrides: &[&str]) -> Pipeline {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let (cfg, base) = RunConfig::load(&dir.join("config.toml"), &o).unwrap();
    Pipeline::new(cfg, base).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("run").join(name)).unwrap()
}

#[test]
fn downstream_stages_need_their_inputs() {
    let ws = workspace(10);
    let mut p = open(ws.path(), &[]);
    for stage in [Stage::MinePairs, Stage::BuildGraph, Stage::BuildEvalSet] {
        let err = p.run_stage(stage).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }
    let err = p.run_stage(Stage::Evaluate).unwrap_err();
    assert!(err.to_string().contains("missing checkpoint"), "{err}");
    let err = p.run_stage(Stage::TrainGrpo).unwrap_err();
    assert!(err.to_string().contains("missing checkpoint"), "{err}");
    assert!(matches!(p.run_stage(Stage::Report), Err(PipelineError::MissingDependency(_))));
}

#[test]
fn rerun_skips_and_changes_rerun() {
    let ws = workspace(12);
    let mut p = open(ws.path(), &[]);
    let mut first = Vec::new();
    p.run_all(|s, st| first.push((s, st))).unwrap();
    assert!(first.iter().all(|(_, st)| *st == StageStatus::Ran));

    let mut p = open(ws.path(), &[]);
    let mut second = Vec::new();
    p.run_all(|s, st| second.push((s, st))).unwrap();
    assert_eq!(second.len(), ALL_STAGES.len());
    assert!(second.iter().all(|(_, st)| *st == StageStatus::UpToDate), "{second:?}");

    // a GRPO setting change reruns GRPO and whatever consumes its checkpoint
    let mut p = open(ws.path(), &["grpo.iterations=5"]);
    assert_eq!(p.run_stage(Stage::TrainSft).unwrap(), StageStatus::UpToDate);
    assert_eq!(p.run_stage(Stage::TrainGrpo).unwrap(), StageStatus::Ran);
    assert_eq!(p.run_stage(Stage::Imagine).unwrap(), StageStatus::Ran);

    // a tampered output is regenerated
    std::fs::write(ws.path().join("run/pairs.jsonl"), "").unwrap();
    assert_eq!(p.run_stage(Stage::MinePairs).unwrap(), StageStatus::Ran);
    assert!(!read(ws.path(), "pairs.jsonl").is_empty());
}

#[test]
fn artifacts_have_the_expected_shape() {
    let ws = workspace(15);
    let mut p = open(ws.path(), &[]);
    p.run_all(|_, _| {}).unwrap();

    let log = read(ws.path(), "grpo_log.csv");
    assert_eq!(log.lines().count(), 1 + 7, "header plus one row per iteration");
    let sft = read(ws.path(), "sft_loss.csv");
    assert_eq!(sft.lines().count(), 1 + 30);

    for line in read(ws.path(), "traces.jsonl").lines() {
        let t: serde_json::Value = serde_json::from_str(line).unwrap();
        let steps = t["perturbed_variables"].as_array().unwrap().len();
        assert_eq!(t["states"].as_array().unwrap().len(), steps + 1);
        assert_eq!(t["step_log_probs"].as_array().unwrap().len(), steps);
    }

    let manifest: serde_json::Value = serde_json::from_str(&read(ws.path(), "manifest.json")).unwrap();
    let text = read(ws.path(), "manifest.json");
    assert!(!text.contains("time"), "manifest must not carry timestamps");
    for s in ALL_STAGES {
        assert!(manifest["stages"][s.name()]["outputs"].as_object().is_some_and(|o| !o.is_empty()));
    }

    let report = read(ws.path(), "report.txt");
    for section in ["Corpus", "Natural pairs", "Pair graph", "GRPO", "Metrics", "Imagination traces"] {
        assert!(report.contains(section), "missing {section}");
    }
    assert!(report.contains("step 1 "));
}

#[test]
fn report_after_ingest_only_has_corpus_stats() {
    let ws = workspace(8);
    let mut p = open(ws.path(), &[]);
    p.run_stage(Stage::Ingest).unwrap();
    p.run_stage(Stage::Report).unwrap();
    let report = read(ws.path(), "report.txt");
    assert!(report.contains("Corpus"));
    assert!(report.contains("trials            8"));
    for absent in ["Natural pairs", "Pair graph", "GRPO", "Metrics", "traces"] {
        assert!(!report.contains(absent), "unexpected {absent}");
    }
}

#[test]
fn single_eval_kind() {
    let ws = workspace(10);
    let mut p = open(ws.path(), &[]);
    p.run_stage(Stage::Ingest).unwrap();
    p.set_eval_kinds(vec![trialcf_core::reward_eval::EvalKind::Arm]);
    p.run_stage(Stage::BuildEvalSet).unwrap();
    assert!(ws.path().join("run/eval_arm.jsonl").exists());
    assert!(!ws.path().join("run/eval_outcome.jsonl").exists());
}

#[test]
fn bad_config_is_exit_code_two() {
    let ws = workspace(3);
    let err = RunConfig::load(&ws.path().join("config.toml"), &["sft.learning_rate=-1".into()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = RunConfig::load(&ws.path().join("missing.toml"), &[]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
