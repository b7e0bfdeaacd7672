//! Staged, manifest-driven pipeline over a run directory.
//!
//! Every stage declares its input artifacts and the config sections it
//! reads. Outputs are recorded in `manifest.json` with content hashes; a
//! stage whose inputs, config and outputs all still match is skipped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::imagination::{
    build_path, default_ordering, dominance_ratio, dominant_path, exact_marginal, predict_terminal, FeatureSpec, PredictMode, TransitionPolicy,
};
use crate::learn::{
    grpo_train, load_checkpoint, save_checkpoint, sft_train, Checkpoint, CheckpointMeta, GrpoConfig, GrpoPrompt,
    SftConfig, SftExample,
};
use crate::pair_miner::{mine_arm_pairs, mine_outcome_pairs, read_pairs, write_pairs, PairKind};
use crate::reward_eval::{
    build_arm_perturbation_set, build_outcome_perturbation_set, evaluate, read_eval_items, read_questions,
    verifier_id, write_per_question, BenchmarkQuestion, EvalItem, EvalKind, EvalSet, Metrics, Prediction,
    QuestionClass, Split, VerifierRegistry,
};
use crate::similarity::{
    build_pair_graph, m_approximate_pairs, validate_delta, ApproxPair, Embedder, GraphParams, HttpEmbedder,
    HttpJudge, Judge, OfflineEmbedder, OfflineJudge, Verdict,
};
use crate::trial_model::{
    ingest_corpus, write_reject_log, Corpus, Discretization, ResultState, UnitRef, VariableRegistry, ARM,
    OUTCOME_MEASURE,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    MissingDependency(String),
    #[error("{stage} failed: {message}")]
    Runtime { stage: String, message: String },
}

impl PipelineError {
    /// 2 config error, 3 missing dependency, 4 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingDependency(_) => 3,
            PipelineError::Runtime { .. } => 4,
        }
    }
}

fn runtime(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Runtime {
        stage: stage.name().to_string(),
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_schema")]
    pub schema_version: String,
    pub questions: PathBuf,
}

fn default_schema() -> String {
    "v1".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub delta: f64,
    pub m: usize,
    pub block: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            delta: 0.8,
            m: 3,
            block: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    #[default]
    Offline,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderSection {
    pub mode: ProviderMode,
    pub embed_url: Option<String>,
    pub judge_url: Option<String>,
    pub timeout_secs: u64,
    pub embed_dim: usize,
    pub judge_threshold: f64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Offline,
            embed_url: None,
            judge_url: None,
            timeout_secs: 30,
            embed_dim: 256,
            judge_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImaginationSection {
    /// Perturbation priority; defaults to arm, outcome measure, then trial
    /// variables alphabetically.
    pub ordering: Option<Vec<String>>,
    pub mode: PredictMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierSection {
    pub superiority_threshold: usize,
}

impl Default for VerifierSection {
    fn default() -> Self {
        Self { superiority_threshold: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub variables: Vec<String>,
    #[serde(default)]
    pub discretization: Discretization,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub provider: ProviderSection,
    #[serde(default)]
    pub imagination: ImaginationSection,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub verifier: VerifierSection,
    #[serde(default)]
    pub run: RunSection,
}

/// Applies a `dotted.key=value` override. The value is read as a TOML
/// literal when it parses as one, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<(Self, PathBuf), PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn registry(&self) -> Result<VariableRegistry, PipelineError> {
        VariableRegistry::new(self.variables.iter().map(String::as_str))
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn feature_spec(&self) -> Result<FeatureSpec, PipelineError> {
        FeatureSpec::new(self.discretization.k(), &self.registry()?).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn ordering(&self) -> Result<Vec<String>, PipelineError> {
        Ok(match &self.imagination.ordering {
            Some(o) => o.clone(),
            None => default_ordering(&self.feature_spec()?),
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg_err = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        let reg = self.registry()?;
        self.discretization.validate().map_err(|e| cfg_err(&e))?;
        validate_delta(self.graph.delta).map_err(|e| cfg_err(&e))?;
        if self.graph.m < 1 {
            return Err(PipelineError::Config("graph.m must be >= 1".into()));
        }
        if self.graph.block == 0 {
            return Err(PipelineError::Config("graph.block must be >= 1".into()));
        }
        self.sft.validate().map_err(|e| cfg_err(&e))?;
        self.grpo.validate().map_err(|e| cfg_err(&e))?;
        if self.verifier.superiority_threshold >= self.discretization.k() {
            return Err(PipelineError::Config(format!(
                "verifier.superiority_threshold {} outside alphabet of size {}",
                self.verifier.superiority_threshold,
                self.discretization.k()
            )));
        }
        if let Some(order) = &self.imagination.ordering {
            for v in order {
                if v != ARM && v != OUTCOME_MEASURE && !reg.contains(v) {
                    return Err(PipelineError::Config(format!("ordering names unknown variable `{v}`")));
                }
            }
        }
        if self.provider.mode == ProviderMode::Http
            && (self.provider.embed_url.is_none() || self.provider.judge_url.is_none())
        {
            return Err(PipelineError::Config("http provider needs embed_url and judge_url".into()));
        }
        if self.provider.embed_dim == 0 {
            return Err(PipelineError::Config("provider.embed_dim must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- stages

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    MinePairs,
    BuildGraph,
    BuildEvalSet,
    TrainSft,
    TrainGrpo,
    Imagine,
    Evaluate,
    Report,
}

pub const ALL_STAGES: [Stage; 9] = [
    Stage::Ingest,
    Stage::MinePairs,
    Stage::BuildGraph,
    Stage::BuildEvalSet,
    Stage::TrainSft,
    Stage::TrainGrpo,
    Stage::Imagine,
    Stage::Evaluate,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::MinePairs => "mine-pairs",
            Stage::BuildGraph => "build-graph",
            Stage::BuildEvalSet => "build-eval-set",
            Stage::TrainSft => "train-sft",
            Stage::TrainGrpo => "train-grpo",
            Stage::Imagine => "imagine",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

pub const CORPUS: &str = "corpus.jsonl";
pub const REJECTS: &str = "rejects.csv";
pub const CORPUS_STATS: &str = "corpus_stats.json";
pub const PAIRS: &str = "pairs.jsonl";
pub const EDGES: &str = "edges.jsonl";
pub const APPROX_PAIRS: &str = "approx_pairs.jsonl";
pub const GRAPH_STATS: &str = "graph_stats.json";
pub const EVAL_OUTCOME: &str = "eval_outcome.jsonl";
pub const EVAL_ARM: &str = "eval_arm.jsonl";
pub const EVAL_DROPPED: &str = "eval_dropped.csv";
pub const SFT_CKPT: &str = "sft.ckpt";
pub const SFT_LOSS: &str = "sft_loss.csv";
pub const GRPO_CKPT: &str = "grpo.ckpt";
pub const GRPO_LOG: &str = "grpo_log.csv";
pub const GRPO_PROMPTS: &str = "grpo_prompts.csv";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const TRACES: &str = "traces.jsonl";
pub const METRICS: &str = "metrics.json";
pub const REPORT: &str = "report.txt";
pub const MANIFEST: &str = "manifest.json";

fn producer(artifact: &str) -> Stage {
    match artifact {
        CORPUS | REJECTS | CORPUS_STATS => Stage::Ingest,
        PAIRS => Stage::MinePairs,
        EDGES | APPROX_PAIRS | GRAPH_STATS => Stage::BuildGraph,
        EVAL_OUTCOME | EVAL_ARM | EVAL_DROPPED => Stage::BuildEvalSet,
        SFT_CKPT | SFT_LOSS => Stage::TrainSft,
        GRPO_CKPT | GRPO_LOG | GRPO_PROMPTS => Stage::TrainGrpo,
        PREDICTIONS | TRACES => Stage::Imagine,
        METRICS => Stage::Evaluate,
        _ => Stage::Report,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

impl std::fmt::Display for StageStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageStatus::Ran => f.write_str("done"),
            StageStatus::UpToDate => f.write_str("skipped (up-to-date)"),
        }
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn sha256_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

enum Input {
    Artifact(&'static str),
    Checkpoint(&'static str),
    External(&'static str, PathBuf),
}

/// A run directory bound to a config.
pub struct Pipeline {
    cfg: RunConfig,
    base: PathBuf,
    out: PathBuf,
    manifest: Manifest,
    eval_kinds: Vec<EvalKind>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, base: PathBuf) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let out = base.join(&cfg.run.output_dir);
        let manifest_path = out.join(MANIFEST);
        let manifest = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", manifest_path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", manifest_path.display())))?
        } else {
            Manifest::default()
        };
        Ok(Self {
            cfg,
            base,
            out,
            manifest,
            eval_kinds: vec![EvalKind::Outcome, EvalKind::Arm],
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Restricts `build-eval-set` to the given kinds.
    pub fn set_eval_kinds(&mut self, kinds: Vec<EvalKind>) {
        self.eval_kinds = kinds;
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn inputs(&self, stage: Stage) -> Vec<Input> {
        use Input::*;
        let corpus = || External("corpus", self.resolve(&self.cfg.corpus.path));
        let questions = || External("questions", self.resolve(&self.cfg.corpus.questions));
        match stage {
            Stage::Ingest => vec![corpus()],
            Stage::MinePairs | Stage::BuildGraph => vec![Artifact(CORPUS)],
            Stage::BuildEvalSet => vec![Artifact(CORPUS), questions()],
            Stage::TrainSft => vec![Artifact(PAIRS)],
            Stage::TrainGrpo => vec![Checkpoint(SFT_CKPT), Artifact(CORPUS), Artifact(APPROX_PAIRS), questions()],
            Stage::Imagine => {
                let mut v = vec![Checkpoint(GRPO_CKPT), Artifact(CORPUS), questions()];
                let built: Vec<&'static str> = [EVAL_OUTCOME, EVAL_ARM]
                    .into_iter()
                    .filter(|f| self.artifact(f).exists())
                    .collect();
                if built.is_empty() {
                    v.push(Artifact(EVAL_OUTCOME));
                }
                v.extend(built.into_iter().map(Artifact));
                v
            }
            Stage::Evaluate => vec![Checkpoint(GRPO_CKPT), Artifact(PREDICTIONS), questions()],
            Stage::Report => Vec::new(),
        }
    }

    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        match stage {
            Stage::Ingest => json!({"schema": c.corpus.schema_version, "variables": c.variables}),
            Stage::MinePairs => json!({"discretization": c.discretization}),
            Stage::BuildGraph => json!({"graph": c.graph, "provider": c.provider, "variables": c.variables}),
            Stage::BuildEvalSet => json!({
                "discretization": c.discretization,
                "provider": c.provider,
                "kinds": self.eval_kinds,
            }),
            Stage::TrainSft => json!({"sft": c.sft, "discretization": c.discretization, "variables": c.variables}),
            Stage::TrainGrpo => json!({
                "grpo": c.grpo,
                "verifier": c.verifier,
                "ordering": c.imagination.ordering,
                "discretization": c.discretization,
            }),
            Stage::Imagine => json!({"imagination": c.imagination, "verifier": c.verifier, "discretization": c.discretization}),
            Stage::Evaluate | Stage::Report => json!({}),
        }
    }

    fn check_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut hashes = BTreeMap::new();
        for input in self.inputs(stage) {
            let (key, path) = match input {
                Input::Artifact(name) => {
                    let p = self.artifact(name);
                    if !p.exists() {
                        return Err(PipelineError::MissingDependency(format!(
                            "missing artifact {name} (run `{}` first)",
                            producer(name).name()
                        )));
                    }
                    (name.to_string(), p)
                }
                Input::Checkpoint(name) => {
                    let p = self.artifact(name);
                    if !p.exists() {
                        return Err(PipelineError::MissingDependency(format!(
                            "missing checkpoint {name} (run `{}` first)",
                            producer(name).name()
                        )));
                    }
                    (name.to_string(), p)
                }
                Input::External(key, p) => {
                    if !p.exists() {
                        return Err(PipelineError::MissingDependency(format!(
                            "missing input file {} ({key})",
                            p.display()
                        )));
                    }
                    (key.to_string(), p)
                }
            };
            let h = sha256_file(&path).map_err(|e| runtime(stage, format!("{}: {e}", path.display())))?;
            hashes.insert(key, h);
        }
        if stage == Stage::Report {
            for (name, rec) in &self.manifest.stages {
                if name == Stage::Report.name() {
                    continue;
                }
                for (out, h) in &rec.outputs {
                    hashes.insert(out.clone(), h.clone());
                }
            }
            if hashes.is_empty() {
                return Err(PipelineError::MissingDependency(
                    "empty run directory: no completed stage to report on".into(),
                ));
            }
        }
        Ok(hashes)
    }

    fn up_to_date(&self, stage: Stage, record: &StageRecord) -> bool {
        let Some(old) = self.manifest.stages.get(stage.name()) else {
            return false;
        };
        old.config_hash == record.config_hash
            && old.inputs == record.inputs
            && !old.outputs.is_empty()
            && old
                .outputs
                .iter()
                .all(|(name, h)| sha256_file(&self.artifact(name)).is_ok_and(|cur| &cur == h))
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(self.artifact(MANIFEST), text + "\n").map_err(|e| runtime(Stage::Report, e))
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<StageStatus, PipelineError> {
        let inputs = self.check_inputs(stage)?;
        let mut record = StageRecord {
            config_hash: sha256_json(&self.stage_config(stage)),
            inputs,
            outputs: BTreeMap::new(),
        };
        if self.up_to_date(stage, &record) {
            return Ok(StageStatus::UpToDate);
        }
        std::fs::create_dir_all(&self.out).map_err(|e| runtime(stage, format!("{}: {e}", self.out.display())))?;
        let outputs = match stage {
            Stage::Ingest => self.ingest(),
            Stage::MinePairs => self.mine_pairs(),
            Stage::BuildGraph => self.build_graph(),
            Stage::BuildEvalSet => self.build_eval_set(),
            Stage::TrainSft => self.train_sft(),
            Stage::TrainGrpo => self.train_grpo(),
            Stage::Imagine => self.imagine(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }?;
        for name in outputs {
            let h = sha256_file(&self.artifact(name)).map_err(|e| runtime(stage, format!("{name}: {e}")))?;
            record.outputs.insert(name.to_string(), h);
        }
        self.manifest.stages.insert(stage.name().to_string(), record);
        self.save_manifest()?;
        Ok(StageStatus::Ran)
    }

    /// Runs every stage in order, reporting each status through `on_stage`.
    pub fn run_all<F: FnMut(Stage, StageStatus)>(&mut self, mut on_stage: F) -> Result<(), PipelineError> {
        for s in ALL_STAGES {
            let status = self.run_stage(s)?;
            on_stage(s, status);
        }
        Ok(())
    }

    // ------------------------------------------------------------ helpers

    fn create(&self, stage: Stage, name: &str) -> Result<BufWriter<File>, PipelineError> {
        let p = self.artifact(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| runtime(stage, format!("{}: {e}", p.display())))
    }

    fn open(&self, stage: Stage, path: &Path) -> Result<BufReader<File>, PipelineError> {
        File::open(path)
            .map(BufReader::new)
            .map_err(|e| runtime(stage, format!("{}: {e}", path.display())))
    }

    fn load_corpus(&self, stage: Stage) -> Result<Corpus, PipelineError> {
        let reg = self.cfg.registry()?;
        let out = ingest_corpus(&self.artifact(CORPUS), &self.cfg.corpus.schema_version, &reg)
            .map_err(|e| runtime(stage, e))?;
        Ok(out.corpus)
    }

    fn load_questions(&self, stage: Stage) -> Result<Vec<BenchmarkQuestion>, PipelineError> {
        let p = self.resolve(&self.cfg.corpus.questions);
        read_questions(self.open(stage, &p)?).map_err(|e| runtime(stage, format!("{}: {e}", p.display())))
    }

    fn providers(&self) -> (Box<dyn Embedder>, Box<dyn Judge>) {
        let p = &self.cfg.provider;
        match p.mode {
            ProviderMode::Offline => (
                Box::new(OfflineEmbedder::with_dim(p.embed_dim)),
                Box::new(OfflineJudge {
                    threshold: p.judge_threshold,
                }),
            ),
            ProviderMode::Http => {
                let timeout = Duration::from_secs(p.timeout_secs);
                (
                    Box::new(HttpEmbedder::from_env(p.embed_url.as_deref().unwrap_or_default(), timeout)),
                    Box::new(HttpJudge::from_env(p.judge_url.as_deref().unwrap_or_default(), timeout)),
                )
            }
        }
    }

    fn verifiers(&self) -> Result<VerifierRegistry, PipelineError> {
        VerifierRegistry::standard(self.cfg.discretization.k(), self.cfg.verifier.superiority_threshold)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn write_json<T: Serialize>(&self, stage: Stage, name: &str, v: &T) -> Result<(), PipelineError> {
        let mut w = self.create(stage, name)?;
        serde_json::to_writer_pretty(&mut w, v).map_err(|e| runtime(stage, e))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| runtime(stage, e))
    }

    fn write_lines<T: Serialize>(&self, stage: Stage, name: &str, items: &[T]) -> Result<(), PipelineError> {
        let mut w = self.create(stage, name)?;
        for it in items {
            serde_json::to_writer(&mut w, it).map_err(|e| runtime(stage, e))?;
            w.write_all(b"\n").map_err(|e| runtime(stage, e))?;
        }
        w.flush().map_err(|e| runtime(stage, e))
    }

    fn read_lines<T: for<'de> Deserialize<'de>>(&self, stage: Stage, name: &str) -> Result<Vec<T>, PipelineError> {
        let mut out = Vec::new();
        for (i, line) in self.open(stage, &self.artifact(name))?.lines().enumerate() {
            let line = line.map_err(|e| runtime(stage, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| runtime(stage, format!("{name}:{}: {e}", i + 1)))?);
        }
        Ok(out)
    }

    fn csv_writer(&self, stage: Stage, name: &str) -> Result<csv::Writer<BufWriter<File>>, PipelineError> {
        Ok(csv::Writer::from_writer(self.create(stage, name)?))
    }

    // ------------------------------------------------------------ stage bodies

    fn ingest(&self) -> Result<Vec<&'static str>, PipelineError> {
        let st = Stage::Ingest;
        let reg = self.cfg.registry()?;
        let src = self.resolve(&self.cfg.corpus.path);
        let out = ingest_corpus(&src, &self.cfg.corpus.schema_version, &reg).map_err(|e| runtime(st, e))?;
        out.corpus
            .save(&self.artifact(CORPUS), &self.cfg.corpus.schema_version)
            .map_err(|e| runtime(st, e))?;
        write_reject_log(self.create(st, REJECTS)?, &out.rejects).map_err(|e| runtime(st, e))?;
        let units = out.corpus.units();
        let resolvable = units
            .iter()
            .filter(|u| out.corpus.state(u, &self.cfg.discretization).is_ok())
            .count();
        let stats = CorpusStats {
            trials: out.corpus.len(),
            units: units.len(),
            resolvable_units: resolvable,
            outcome_measures: out.corpus.iter().map(|t| t.outcome_measures.len()).sum(),
            arms: out.corpus.iter().map(|t| t.arms.len()).sum(),
            rejects: out.rejects.len(),
        };
        self.write_json(st, CORPUS_STATS, &stats)?;
        Ok(vec![CORPUS, REJECTS, CORPUS_STATS])
    }

    fn mine_pairs(&self) -> Result<Vec<&'static str>, PipelineError> {
        let st = Stage::MinePairs;
        let corpus = self.load_corpus(st)?;
        let bins = &self.cfg.discretization;
        let mut pairs = mine_outcome_pairs(&corpus, bins).map_err(|e| runtime(st, e))?;
        pairs.extend(mine_arm_pairs(&corpus, bins).map_err(|e| runtime(st, e))?);
        let mut w = self.create(st, PAIRS)?;
        write_pairs(&mut w, &pairs, bins).map_err(|e| runtime(st, e))?;
        w.flush().map_err(|e| runtime(st, e))?;
        Ok(vec![PAIRS])
    }

    fn build_graph(&self) -> Result<Vec<&'static str>, PipelineError> {
        let st = Stage::BuildGraph;
        let corpus = self.load_corpus(st)?;
        let (embedder, judge) = self.providers();
        let mut variables = self.cfg.variables.clone();
        variables.sort();
        variables.push(OUTCOME_MEASURE.into());
        variables.push(ARM.into());
        let params = GraphParams {
            delta: self.cfg.graph.delta,
            block: self.cfg.graph.block,
        };
        let built = build_pair_graph(&corpus, &variables, embedder.as_ref(), judge.as_ref(), &params)
            .map_err(|e| runtime(st, e))?;
        let mut w = self.create(st, EDGES)?;
        built.graph.write_edges(&mut w).map_err(|e| runtime(st, e))?;
        w.flush().map_err(|e| runtime(st, e))?;
        let approx = m_approximate_pairs(&built.graph, self.cfg.graph.m).map_err(|e| runtime(st, e))?;
        self.write_lines(st, APPROX_PAIRS, &approx)?;
        let count = |v: Verdict| built.judged.iter().filter(|e| e.judge_verdict == v).count();
        let stats = GraphStats {
            nodes: built.graph.nodes().len(),
            candidates: built.judged.len(),
            accepted: count(Verdict::Accepted),
            rejected: count(Verdict::Rejected),
            skipped: count(Verdict::Skipped),
            edges: built.graph.edge_count(),
            connected_pairs: built.graph.connected_pairs(),
            approx_pairs: approx.len(),
        };
        self.write_json(st, GRAPH_STATS, &stats)?;
        Ok(vec![EDGES, APPROX_PAIRS, GRAPH_STATS])
    }

    fn build_eval_set(&self) -> Result<Vec<&'static str>, PipelineError> {
        let st = Stage::BuildEvalSet;
        let corpus = self.load_corpus(st)?;
        let questions: Vec<BenchmarkQuestion> = self
            .load_questions(st)?
            .into_iter()
            .filter(|q| q.split == Split::Eval)
            .collect();
        let bins = &self.cfg.discretization;
        let (embedder, _) = self.providers();
        let mut outputs = Vec::new();
        let mut dropped = self.csv_writer(st, EVAL_DROPPED)?;
        dropped
            .write_record(["kind", "question_id", "reason"])
            .map_err(|e| runtime(st, e))?;
        for kind in [EvalKind::Outcome, EvalKind::Arm] {
            if !self.eval_kinds.contains(&kind) {
                let stale = self.artifact(eval_file(kind));
                if stale.exists() {
                    std::fs::remove_file(&stale).map_err(|e| runtime(st, format!("{}: {e}", stale.display())))?;
                }
                continue;
            }
            let set: EvalSet = match kind {
                EvalKind::Outcome => build_outcome_perturbation_set(&corpus, &questions, bins, embedder.as_ref()),
                EvalKind::Arm => build_arm_perturbation_set(&corpus, &questions, bins),
            }
            .map_err(|e| runtime(st, e))?;
            self.write_lines(st, eval_file(kind), &set.items)?;
            for d in &set.dropped {
                dropped
                    .write_record([kind_name(kind), &d.question_id, &d.reason])
                    .map_err(|e| runtime(st, e))?;
            }
            outputs.push(eval_file(kind));
        }
        dropped.flush().map_err(|e| runtime(st, e))?;
        outputs.push(EVAL_DROPPED);
        Ok(outputs)
    }

    fn train_sft(&self) -> Result<Vec<&'static str>, PipelineError> {
        let st = Stage::TrainSft;
        let spec = self.cfg.feature_spec()?;
        let pairs = read_pairs(self.open(st, &self.artifact(PAIRS))?).map_err(|e| runtime(st, e))?;
        let examples = pairs
            .iter()
            .map(|p| SftExample::from_pair(&spec, p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| runtime(st, e))?;
        if examples.is_empty() {
            return Err(runtime(st, "no natural pairs to train on"));
        }
        let outcome = sft_train(&TransitionPolicy::zeros(spec.clone()), &examples, &self.cfg.sft)
            .map_err(|e| runtime(st, e))?;
        let ckpt = Checkpoint {
            reference: outcome.policy.clone(),
            policy: outcome.policy,
            meta: CheckpointMeta {
                stage: "sft".into(),
                step: self.cfg.sft.epochs as u64,
                seed: self.cfg.sft.seed,
                losses: outcome.loss_history.clone(),
                feature_spec: spec,
            },
        };
        save_checkpoint(&ckpt, &self.artifact(SFT_CKPT)).map_err(|e| runtime(st, e))?;
        let mut w = self.csv_writer(st, SFT_LOSS)?;
        w.write_record(["epoch", "loss"]).map_err(|e| runtime(st, e))?;
        for (i, l) in outcome.loss_history.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{l:.12}")])
                .map_err(|e| runtime(st, e))?;
        }
        w.flush().map_err(|e| runtime(st, e))?;
        Ok(vec![SFT_CKPT, SFT_LOSS])
    }

    /// The comparator state of a comparative question, when it resolves.
    fn comparator_state(&self, corpus: &Corpus, q: &BenchmarkQuestion) -> Result<Option<ResultState>, String> {
        match q.class {
            QuestionClass::Superiority => Ok(None),
            QuestionClass::ComparativeEffect => {
                let unit = q.comparator_unit().ok_or("comparative question without comparator arm")?;
                corpus
                    .state(&unit, &self.cfg.discretization)
                    .map(Some)
                    .map_err(|e| format!("comparator {unit}: {e}"))
            }
        }
    }

    fn train_grpo(&self) -> Result<Vec<&'static str>, PipelineError> {
        let st = Stage::TrainGrpo;
        let spec = self.cfg.feature_spec()?;
        let sft = load_checkpoint(&self.artifact(SFT_CKPT), Some(&spec)).map_err(|e| runtime(st, e))?;
        let corpus = self.load_corpus(st)?;
        let approx: Vec<ApproxPair> = self.read_lines(st, APPROX_PAIRS)?;
        let ordering = self.cfg.ordering()?;
        let bins = &self.cfg.discretization;
        let mut prompts = Vec::new();
        let mut log = self.csv_writer(st, GRPO_PROMPTS)?;
        log.write_record(["question_id", "source_unit", "target_unit", "steps", "status"])
            .map_err(|e| runtime(st, e))?;
        for q in self.load_questions(st)?.into_iter().filter(|q| q.split == Split::Train) {
            let target = &q.target_unit;
            // pairs are ranked by edge count, so the first resolvable partner is the closest
            let partner = approx.iter().find_map(|p| {
                let other = if &p.a == target {
                    &p.b
                } else if &p.b == target {
                    &p.a
                } else {
                    return None;
                };
                corpus.state(other, bins).ok().map(|s| (other.clone(), s))
            });
            let status = (|| -> Result<GrpoPrompt, String> {
                q.validate(&corpus).map_err(|e| e.to_string())?;
                let (source, r0) = partner.clone().ok_or("no approximate partner")?;
                let src_cfg = corpus.config(&source).map_err(|e| e.to_string())?;
                let tgt_cfg = corpus.config(target).map_err(|e| e.to_string())?;
                Ok(GrpoPrompt {
                    question_id: q.id.clone(),
                    source_result: r0,
                    path: build_path(&src_cfg, &tgt_cfg, &ordering),
                    gold_label: q.gold.clone(),
                    verifier_id: verifier_id(q.class).into(),
                    comparator_state: self.comparator_state(&corpus, &q)?,
                })
            })();
            let source = partner.as_ref().map(|p| p.0.to_string()).unwrap_or_default();
            let (steps, note) = match status {
                Ok(p) => {
                    let steps = p.path.len().to_string();
                    prompts.push(p);
                    (steps, "ok".to_string())
                }
                Err(reason) => {
                    log::info!("question {} not used for GRPO: {reason}", q.id);
                    (String::new(), reason)
                }
            };
            log.write_record([q.id.as_str(), &source, &target.to_string(), &steps, &note])
                .map_err(|e| runtime(st, e))?;
        }
        log.flush().map_err(|e| runtime(st, e))?;
        if prompts.is_empty() {
            return Err(runtime(st, "no usable training questions"));
        }
        let verifiers = self.verifiers()?;
        let (policy, curve) =
            grpo_train(&sft.policy, &sft.policy, &prompts, &self.cfg.grpo, &verifiers).map_err(|e| runtime(st, e))?;
        let ckpt = Checkpoint {
            policy,
            reference: sft.policy,
            meta: CheckpointMeta {
                stage: "grpo".into(),
                step: self.cfg.grpo.iterations as u64,
                seed: self.cfg.grpo.seed,
                losses: curve.iter().map(|s| s.loss).collect(),
                feature_spec: spec,
            },
        };
        save_checkpoint(&ckpt, &self.artifact(GRPO_CKPT)).map_err(|e| runtime(st, e))?;
        let mut w = self.csv_writer(st, GRPO_LOG)?;
        w.write_record(["step", "loss", "mean_reward", "mean_abs_advantage", "clip_fraction", "kl"])
            .map_err(|e| runtime(st, e))?;
        for s in &curve {
            w.write_record([
                (s.iteration + 1).to_string(),
                format!("{:.12}", s.loss),
                format!("{:.12}", s.mean_reward),
                format!("{:.12}", s.mean_abs_advantage),
                format!("{:.12}", s.clip_fraction),
                format!("{:.12}", s.kl),
            ])
            .map_err(|e| runtime(st, e))?;
        }
        w.flush().map_err(|e| runtime(st, e))?;
        Ok(vec![GRPO_CKPT, GRPO_LOG, GRPO_PROMPTS])
    }

    fn imagine(&self) -> Result<Vec<&'static str>, PipelineError> {
        let st = Stage::Imagine;
        let spec = self.cfg.feature_spec()?;
        let ckpt = load_checkpoint(&self.artifact(GRPO_CKPT), Some(&spec)).map_err(|e| runtime(st, e))?;
        let corpus = self.load_corpus(st)?;
        let questions: BTreeMap<String, BenchmarkQuestion> =
            self.load_questions(st)?.into_iter().map(|q| (q.id.clone(), q)).collect();
        let verifiers = self.verifiers()?;
        let ordering = self.cfg.ordering()?;
        let mut predictions = Vec::new();
        let mut traces = Vec::new();
        for kind in [EvalKind::Outcome, EvalKind::Arm] {
            let path = self.artifact(eval_file(kind));
            if !path.exists() {
                continue;
            }
            let items = read_eval_items(self.open(st, &path)?).map_err(|e| runtime(st, e))?;
            for item in items {
                match self.imagine_item(&ckpt.policy, &corpus, &questions, &verifiers, &ordering, &item) {
                    Ok((p, t)) => {
                        predictions.push(p);
                        traces.push(t);
                    }
                    Err(reason) => log::warn!("question {} not imagined: {reason}", item.question_id),
                }
            }
        }
        self.write_lines(st, PREDICTIONS, &predictions)?;
        self.write_lines(st, TRACES, &traces)?;
        Ok(vec![PREDICTIONS, TRACES])
    }

    fn imagine_item(
        &self,
        policy: &TransitionPolicy,
        corpus: &Corpus,
        questions: &BTreeMap<String, BenchmarkQuestion>,
        verifiers: &VerifierRegistry,
        ordering: &[String],
        item: &EvalItem,
    ) -> Result<(KindPrediction, TraceRecord), String> {
        let q = questions.get(&item.question_id).ok_or("question not found")?;
        let src = corpus.config(&item.partner).map_err(|e| e.to_string())?;
        let tgt = corpus.config(&item.target).map_err(|e| e.to_string())?;
        let path = build_path(&src, &tgt, ordering);
        let mode = self.cfg.imagination.mode;
        let terminal = predict_terminal(policy, &path, item.partner_state, mode).map_err(|e| e.to_string())?;
        let dominant = dominant_path(policy, &path, item.partner_state).map_err(|e| e.to_string())?;
        let dominance = dominance_ratio(policy, &path, item.partner_state).map_err(|e| e.to_string())?;
        let comparator = self.comparator_state(corpus, q)?;
        let label = verifiers
            .label(verifier_id(q.class), terminal, comparator)
            .map_err(|e| e.to_string())?;
        let bins = &self.cfg.discretization;
        let name = |s: ResultState| bins.label(s).unwrap_or("?").to_string();
        Ok((
            KindPrediction {
                kind: item.kind,
                question_id: q.id.clone(),
                label: label.to_string(),
                terminal,
            },
            TraceRecord {
                question_id: q.id.clone(),
                kind: item.kind,
                source: item.partner.clone(),
                target: item.target.clone(),
                mode,
                perturbed_variables: dominant.perturbed_variables.clone(),
                states: dominant.states.iter().map(|s| name(*s)).collect(),
                step_log_probs: dominant.step_log_probs.clone(),
                log_prob: dominant.log_prob,
                dominance,
                predicted_state: name(terminal),
                predicted_label: label.to_string(),
            },
        ))
    }

    fn evaluate(&self) -> Result<Vec<&'static str>, PipelineError> {
        let st = Stage::Evaluate;
        let predictions: Vec<KindPrediction> = self.read_lines(st, PREDICTIONS)?;
        let questions = self.load_questions(st)?;
        let metrics = evaluate_by_kind(&predictions, &questions).map_err(|e| runtime(st, e))?;
        self.write_json(st, METRICS, &metrics)?;
        let mut outputs = vec![METRICS];
        for kind in [EvalKind::Outcome, EvalKind::Arm] {
            let preds = plain_predictions(&predictions, kind);
            let name = per_question_file(kind);
            write_per_question(self.create(st, name)?, &preds, &questions).map_err(|e| runtime(st, e))?;
            outputs.push(name);
        }
        Ok(outputs)
    }

    fn report(&self) -> Result<Vec<&'static str>, PipelineError> {
        let st = Stage::Report;
        let done = |s: Stage| self.manifest.stages.contains_key(s.name());
        let mut r = String::new();
        let line = |r: &mut String, s: String| {
            r.push_str(&s);
            r.push('\n');
        };
        line(&mut r, "Run report".into());
        line(&mut r, "==========".into());
        if done(Stage::Ingest) {
            let s: CorpusStats = self.read_json(st, CORPUS_STATS)?;
            line(&mut r, String::new());
            line(&mut r, "Corpus".into());
            line(&mut r, format!("  trials            {}", s.trials));
            line(&mut r, format!("  trial units       {}", s.units));
            line(&mut r, format!("  resolvable units  {}", s.resolvable_units));
            line(&mut r, format!("  outcome measures  {}", s.outcome_measures));
            line(&mut r, format!("  arms              {}", s.arms));
            line(&mut r, format!("  rejected records  {}", s.rejects));
        }
        if done(Stage::MinePairs) {
            let pairs = read_pairs(self.open(st, &self.artifact(PAIRS))?).map_err(|e| runtime(st, e))?;
            let n = |k: PairKind| pairs.iter().filter(|p| p.kind == k).count();
            line(&mut r, String::new());
            line(&mut r, "Natural pairs".into());
            line(&mut r, format!("  outcome-measure pairs  {}", n(PairKind::OutcomeMeasure)));
            line(&mut r, format!("  same-drug arm pairs    {}", n(PairKind::Arm)));
        }
        if done(Stage::BuildGraph) {
            let g: GraphStats = self.read_json(st, GRAPH_STATS)?;
            line(&mut r, String::new());
            line(&mut r, "Pair graph".into());
            line(&mut r, format!("  nodes             {}", g.nodes));
            line(
                &mut r,
                format!(
                    "  candidates        {} (accepted {}, rejected {}, skipped {})",
                    g.candidates, g.accepted, g.rejected, g.skipped
                ),
            );
            line(&mut r, format!("  edges             {}", g.edges));
            line(&mut r, format!("  connected pairs   {}", g.connected_pairs));
            line(&mut r, format!("  M-approx pairs    {} (M = {})", g.approx_pairs, self.cfg.graph.m));
        }
        if done(Stage::BuildEvalSet) {
            line(&mut r, String::new());
            line(&mut r, "Evaluation sets".into());
            let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
            let mut rd = csv::Reader::from_reader(self.open(st, &self.artifact(EVAL_DROPPED))?);
            for rec in rd.records() {
                let rec = rec.map_err(|e| runtime(st, e))?;
                *dropped.entry(rec[0].to_string()).or_default() += 1;
            }
            for kind in [EvalKind::Outcome, EvalKind::Arm] {
                let p = self.artifact(eval_file(kind));
                if !p.exists() {
                    continue;
                }
                let n = read_eval_items(self.open(st, &p)?).map_err(|e| runtime(st, e))?.len();
                let d = dropped.get(kind_name(kind)).copied().unwrap_or(0);
                line(&mut r, format!("  {:<8} {n} items, {d} dropped", kind_name(kind)));
            }
        }
        if done(Stage::TrainSft) {
            let losses = read_csv_column(&self.artifact(SFT_LOSS), 1).map_err(|e| runtime(st, e))?;
            line(&mut r, String::new());
            line(&mut r, "Supervised fine-tuning".into());
            line(&mut r, format!("  epochs            {}", losses.len()));
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                line(&mut r, format!("  loss              {first:.4} -> {last:.4}"));
            }
        }
        if done(Stage::TrainGrpo) {
            let rewards = read_csv_column(&self.artifact(GRPO_LOG), 2).map_err(|e| runtime(st, e))?;
            let kls = read_csv_column(&self.artifact(GRPO_LOG), 5).map_err(|e| runtime(st, e))?;
            line(&mut r, String::new());
            line(&mut r, "GRPO".into());
            line(&mut r, format!("  iterations        {}", rewards.len()));
            if !rewards.is_empty() {
                let w = rewards.len().min(10);
                let head = rewards[..w].iter().sum::<f64>() / w as f64;
                let tail = rewards[rewards.len() - w..].iter().sum::<f64>() / w as f64;
                line(&mut r, format!("  mean reward       {head:.4} (first {w}) -> {tail:.4} (last {w})"));
                line(&mut r, format!("  final KL to ref   {:.6}", kls[kls.len() - 1]));
            }
        }
        if done(Stage::Evaluate) {
            let m: BTreeMap<String, Metrics> = self.read_json(st, METRICS)?;
            line(&mut r, String::new());
            line(&mut r, "Metrics (percent)".into());
            for (kind, m) in &m {
                line(
                    &mut r,
                    format!(
                        "  {kind:<8} n={:<4} macro-F1 {:>6.2}  weighted acc {:>6.2}  balanced acc {:>6.2}",
                        m.n, m.macro_f1, m.weighted_accuracy, m.balanced_accuracy
                    ),
                );
                line(&mut r, format!("    confusion (rows gold): {}", m.labels.join(" | ")));
                for (label, row) in m.labels.iter().zip(&m.confusion) {
                    let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
                    line(&mut r, format!("    {label:<15} {}", cells.join("")));
                }
            }
        }
        if done(Stage::Imagine) {
            let traces: Vec<TraceRecord> = self.read_lines(st, TRACES)?;
            line(&mut r, String::new());
            line(&mut r, format!("Imagination traces ({} total, first {} shown)", traces.len(), traces.len().min(5)));
            for t in traces.iter().take(5) {
                line(
                    &mut r,
                    format!("  {} [{}] {} -> {}", t.question_id, kind_name(t.kind), t.source, t.target),
                );
                line(&mut r, format!("    start {}", t.states[0]));
                for (i, v) in t.perturbed_variables.iter().enumerate() {
                    line(
                        &mut r,
                        format!("    step {} {v}: {} (log p {:.4})", i + 1, t.states[i + 1], t.step_log_probs[i]),
                    );
                }
                line(
                    &mut r,
                    format!(
                        "    predicted {} => {} (dominant path carries {:.1}% of its mass)",
                        t.predicted_state,
                        t.predicted_label,
                        100.0 * t.dominance
                    ),
                );
            }
        }
        std::fs::write(self.artifact(REPORT), r).map_err(|e| runtime(st, e))?;
        Ok(vec![REPORT])
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, stage: Stage, name: &str) -> Result<T, PipelineError> {
        serde_json::from_reader(self.open(stage, &self.artifact(name))?).map_err(|e| runtime(stage, format!("{name}: {e}")))
    }

    /// Loads the checkpoint a standalone `imagine` call uses.
    pub fn load_policy(&self, path: Option<&Path>) -> Result<TransitionPolicy, PipelineError> {
        let p = path.map(Path::to_path_buf).unwrap_or_else(|| self.artifact(GRPO_CKPT));
        if !p.exists() {
            return Err(PipelineError::MissingDependency(format!("missing checkpoint {}", p.display())));
        }
        let spec = self.cfg.feature_spec()?;
        Ok(load_checkpoint(&p, Some(&spec)).map_err(|e| runtime(Stage::Imagine, e))?.policy)
    }

    /// Imagines the result of `target` starting from the observed result of
    /// `source`, outside any evaluation set.
    pub fn imagine_units(
        &self,
        source: &UnitRef,
        target: &UnitRef,
        mode: Option<PredictMode>,
        checkpoint: Option<&Path>,
    ) -> Result<AdhocImagination, PipelineError> {
        let st = Stage::Imagine;
        let policy = self.load_policy(checkpoint)?;
        let corpus = self.corpus()?;
        let bins = &self.cfg.discretization;
        let r0 = corpus.state(source, bins).map_err(|e| runtime(st, format!("source {source}: {e}")))?;
        let src = corpus.config(source).map_err(|e| runtime(st, e))?;
        let tgt = corpus.config(target).map_err(|e| runtime(st, e))?;
        let path = build_path(&src, &tgt, &self.cfg.ordering()?);
        let mode = mode.unwrap_or(self.cfg.imagination.mode);
        let terminal = predict_terminal(&policy, &path, r0, mode).map_err(|e| runtime(st, e))?;
        let dominant = dominant_path(&policy, &path, r0).map_err(|e| runtime(st, e))?;
        let marginal = exact_marginal(&policy, &path, r0).map_err(|e| runtime(st, e))?;
        let name = |s: ResultState| bins.label(s).unwrap_or("?").to_string();
        Ok(AdhocImagination {
            source: source.clone(),
            target: target.clone(),
            mode,
            source_state: name(r0),
            perturbed_variables: dominant.perturbed_variables,
            dominant_states: dominant.states.iter().map(|s| name(*s)).collect(),
            dominant_log_prob: dominant.log_prob,
            terminal_distribution: marginal,
            predicted_state: name(terminal),
        })
    }

    /// Corpus as stored in the run directory.
    pub fn corpus(&self) -> Result<Corpus, PipelineError> {
        if !self.artifact(CORPUS).exists() {
            return Err(PipelineError::MissingDependency(format!(
                "missing artifact {CORPUS} (run `ingest` first)"
            )));
        }
        self.load_corpus(Stage::Imagine)
    }
}

fn read_csv_column(path: &Path, col: usize) -> Result<Vec<f64>, String> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    rd.records()
        .map(|r| {
            let r = r.map_err(|e| e.to_string())?;
            r.get(col)
                .ok_or_else(|| format!("missing column {col}"))?
                .parse::<f64>()
                .map_err(|e| e.to_string())
        })
        .collect()
}

pub fn eval_file(kind: EvalKind) -> &'static str {
    match kind {
        EvalKind::Outcome => EVAL_OUTCOME,
        EvalKind::Arm => EVAL_ARM,
    }
}

fn per_question_file(kind: EvalKind) -> &'static str {
    match kind {
        EvalKind::Outcome => "per_question_outcome.csv",
        EvalKind::Arm => "per_question_arm.csv",
    }
}

pub fn kind_name(kind: EvalKind) -> &'static str {
    match kind {
        EvalKind::Outcome => "outcome",
        EvalKind::Arm => "arm",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub trials: usize,
    pub units: usize,
    pub resolvable_units: usize,
    pub outcome_measures: usize,
    pub arms: usize,
    pub rejects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub candidates: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub skipped: usize,
    pub edges: usize,
    pub connected_pairs: usize,
    pub approx_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdhocImagination {
    pub source: UnitRef,
    pub target: UnitRef,
    pub mode: PredictMode,
    pub source_state: String,
    pub perturbed_variables: Vec<String>,
    pub dominant_states: Vec<String>,
    pub dominant_log_prob: f64,
    pub terminal_distribution: Vec<f64>,
    pub predicted_state: String,
}

/// Metrics for a standalone predictions file. Lines carrying a `kind`
/// field are scored per evaluation set, the rest under `all`.
pub fn evaluate_files(questions: &Path, predictions: &Path) -> Result<BTreeMap<String, Metrics>, PipelineError> {
    let st = Stage::Evaluate;
    let open = |p: &Path| {
        File::open(p)
            .map(BufReader::new)
            .map_err(|e| PipelineError::MissingDependency(format!("{}: {e}", p.display())))
    };
    let qs = read_questions(open(questions)?).map_err(|e| runtime(st, format!("{}: {e}", questions.display())))?;
    let mut groups: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for (i, line) in open(predictions)?.lines().enumerate() {
        let line = line.map_err(|e| runtime(st, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| runtime(st, format!("predictions:{}: {e}", i + 1)))?;
        let group = v.get("kind").and_then(|k| k.as_str()).unwrap_or("all").to_string();
        let p: Prediction =
            serde_json::from_value(v).map_err(|e| runtime(st, format!("predictions:{}: {e}", i + 1)))?;
        groups.entry(group).or_default().push(p);
    }
    if groups.is_empty() {
        return Err(runtime(st, "predictions file is empty"));
    }
    groups
        .into_iter()
        .map(|(k, preds)| evaluate(&preds, &qs).map(|m| (k, m)).map_err(|e| runtime(st, e)))
        .collect()
}

/// Prediction tagged with the evaluation set it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindPrediction {
    pub kind: EvalKind,
    pub question_id: String,
    pub label: String,
    pub terminal: ResultState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question_id: String,
    pub kind: EvalKind,
    pub source: UnitRef,
    pub target: UnitRef,
    pub mode: PredictMode,
    pub perturbed_variables: Vec<String>,
    /// State labels R(0)..R(T) along the dominant path.
    pub states: Vec<String>,
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
    /// Share of the terminal's marginal mass carried by the dominant path.
    pub dominance: f64,
    pub predicted_state: String,
    pub predicted_label: String,
}

fn plain_predictions(preds: &[KindPrediction], kind: EvalKind) -> Vec<Prediction> {
    preds
        .iter()
        .filter(|p| p.kind == kind)
        .map(|p| Prediction {
            question_id: p.question_id.clone(),
            label: p.label.clone(),
        })
        .collect()
}

/// Metrics per evaluation set that has predictions.
pub fn evaluate_by_kind(
    predictions: &[KindPrediction],
    questions: &[BenchmarkQuestion],
) -> Result<BTreeMap<String, Metrics>, crate::reward_eval::RewardError> {
    let mut out = BTreeMap::new();
    for kind in [EvalKind::Outcome, EvalKind::Arm] {
        let preds = plain_predictions(predictions, kind);
        if !preds.is_empty() {
            out.insert(kind_name(kind).to_string(), evaluate(&preds, questions)?);
        }
    }
    Ok(out)
}
