use std::path::Path;
use std::process::{Command, Output};

fn trialcf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trialcf"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(trials: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = trialcf(dir.path(), &["make-fixture", "--out", "fx", "--trials", trials, "--seed", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir
}

const CFG: &[&str] = &["--config", "fx/config.toml", "--set", "grpo.iterations=5", "--set", "sft.epochs=20"];

fn with_cfg<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = CFG.to_vec();
    v.extend_from_slice(args);
    v
}

#[test]
fn evaluate_before_training_reports_missing_checkpoint() {
    let dir = fixture("8");
    let out = trialcf(dir.path(), &with_cfg(&["evaluate"]));
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("missing checkpoint"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = fixture("4");
    for args in [
        vec!["ingest"],
        with_cfg(&["--set", "graph.delta=0", "ingest"]),
        with_cfg(&["--set", "nope.key=1", "ingest"]),
        with_cfg(&["build-graph", "--provider", "http"]),
        with_cfg(&["--workers", "0", "ingest"]),
    ] {
        let out = trialcf(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn pipeline_runs_then_skips() {
    let dir = fixture("12");
    let out = trialcf(dir.path(), &with_cfg(&["--workers", "2", "pipeline"]));
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.ends_with(": done")).count(), 9);

    let manifest = std::fs::read(dir.path().join("fx/run/manifest.json")).unwrap();
    let out = trialcf(dir.path(), &with_cfg(&["pipeline"]));
    assert!(out.status.success());
    assert_eq!(
        stdout(&out).lines().filter(|l| l.ends_with("skipped (up-to-date)")).count(),
        9,
        "{}",
        stdout(&out)
    );
    assert_eq!(std::fs::read(dir.path().join("fx/run/manifest.json")).unwrap(), manifest);

    let out = trialcf(dir.path(), &with_cfg(&["train-grpo"]));
    assert_eq!(stdout(&out).trim(), "train-grpo: skipped (up-to-date)");
}

#[test]
fn stages_one_by_one_and_report() {
    let dir = fixture("10");
    let out = trialcf(dir.path(), &with_cfg(&["ingest"]));
    assert_eq!(stdout(&out).trim(), "ingest: done");
    let out = trialcf(dir.path(), &with_cfg(&["report"]));
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("fx/run/report.txt")).unwrap();
    assert!(report.contains("Corpus") && !report.contains("GRPO"));

    for stage in ["mine-pairs", "build-graph", "train-sft", "train-grpo"] {
        let out = trialcf(dir.path(), &with_cfg(&[stage]));
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let out = trialcf(dir.path(), &with_cfg(&["build-eval-set", "--kind", "arm"]));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!dir.path().join("fx/run/eval_outcome.jsonl").exists());
    for stage in ["imagine", "evaluate", "report"] {
        let out = trialcf(dir.path(), &with_cfg(&[stage]));
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let report = std::fs::read_to_string(dir.path().join("fx/run/report.txt")).unwrap();
    assert!(report.contains("GRPO") && report.contains("Metrics"));
}

#[test]
fn standalone_evaluate_and_adhoc_imagine() {
    let dir = fixture("10");
    let out = trialcf(dir.path(), &with_cfg(&["pipeline"]));
    assert!(out.status.success(), "{}", stderr(&out));

    let out = trialcf(
        dir.path(),
        &["evaluate", "--questions", "fx/questions.jsonl", "--predictions", "fx/run/predictions.jsonl"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fx/run/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, stored);

    let out = trialcf(
        dir.path(),
        &with_cfg(&["imagine", "--source", "SYN0001/OM1/A1", "--target", "SYN0002/OM1/A1", "--mode", "marginal"]),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let dist: f64 = v["terminal_distribution"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((dist - 1.0).abs() < 1e-12);
    assert_eq!(
        v["dominant_states"].as_array().unwrap().len(),
        v["perturbed_variables"].as_array().unwrap().len() + 1
    );

    let out = trialcf(
        dir.path(),
        &with_cfg(&["imagine", "--source", "SYN0001/OM1/A1", "--target", "SYN0002/OM1/A1", "--checkpoint", "nope.ckpt"]),
    );
    assert_eq!(out.status.code(), Some(3));
    let out = trialcf(dir.path(), &with_cfg(&["imagine", "--source", "not-a-unit", "--target", "x/y/z"]));
    assert_eq!(out.status.code(), Some(2), "clap usage errors exit with 2");
}
