//! Clinical-trial data model.
//!
//! A trial unit is the triple (trial, outcome measure, study arm) whose
//! reported result is the quantity the rest of the pipeline reasons about.
//! Corpora are newline-delimited JSON with a `#schema:<version>` header line;
//! invalid records are rejected individually and reported with their line
//! number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Pseudo-variable name for the outcome measure of a unit.
pub const OUTCOME_MEASURE: &str = "outcome_measure";
/// Pseudo-variable name for the study arm of a unit.
pub const ARM: &str = "arm";
/// Name of the trial-level variable holding the enrollment count.
pub const ENROLLMENT: &str = "enrollment";

const SCHEMA_PREFIX: &str = "#schema:";

#[derive(Debug, thiserror::Error)]
pub enum TrialError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("schema header mismatch: expected `#schema:{expected}`, found `{found}`")]
    SchemaMismatch { expected: String, found: String },
    #[error("unresolvable result")]
    UnresolvableResult,
    #[error("unit not normalizable: `{0}`")]
    UnitNotNormalizable(String),
    #[error("invalid discretization: {0}")]
    InvalidDiscretization(String),
    #[error("invalid variable registry: {0}")]
    InvalidRegistry(String),
    #[error("unit {0} does not resolve against the corpus")]
    UnresolvedUnit(UnitRef),
    #[error("malformed unit reference `{0}` (expected trial/outcome_measure/arm)")]
    MalformedUnitRef(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrialError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        TrialError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialVariable {
    pub name: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_value: Option<Quantity>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Primary,
    Secondary,
}

/// Which direction of the raw result counts as benefit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMeasure {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub timeframe: String,
    pub kind: OutcomeKind,
    #[serde(default)]
    pub direction: Direction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    Treatment,
    Comparator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyArm {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub drug_names: Vec<String>,
    #[serde(default)]
    pub dose_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose_mg_per_day: Option<f64>,
    pub arm_kind: ArmKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    /// `None` when the registry lists the result but no usable value.
    pub value: Option<f64>,
    pub unit: String,
    pub n_analyzed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significant: Option<bool>,
    #[serde(default)]
    pub raw_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub outcome_measure_id: String,
    pub arm_id: String,
    pub result: ResultRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub variables: Vec<TrialVariable>,
    pub outcome_measures: Vec<OutcomeMeasure>,
    pub arms: Vec<StudyArm>,
    pub results: Vec<ResultEntry>,
}

impl TrialRecord {
    pub fn variable(&self, name: &str) -> Option<&TrialVariable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn outcome_measure(&self, id: &str) -> Option<&OutcomeMeasure> {
        self.outcome_measures.iter().find(|o| o.id == id)
    }

    pub fn arm(&self, id: &str) -> Option<&StudyArm> {
        self.arms.iter().find(|a| a.id == id)
    }

    pub fn result(&self, outcome_measure_id: &str, arm_id: &str) -> Option<&ResultRecord> {
        self.results
            .iter()
            .find(|r| r.outcome_measure_id == outcome_measure_id && r.arm_id == arm_id)
            .map(|r| &r.result)
    }

    /// Results keyed by (outcome measure id, arm id).
    pub fn results_map(&self) -> BTreeMap<(&str, &str), &ResultRecord> {
        self.results
            .iter()
            .map(|r| ((r.outcome_measure_id.as_str(), r.arm_id.as_str()), &r.result))
            .collect()
    }

    pub fn enrollment(&self) -> Option<f64> {
        self.variable(ENROLLMENT)
            .and_then(|v| v.numeric_value.as_ref())
            .map(|q| q.value)
    }

    fn validate(&self, registry: &VariableRegistry) -> Result<(), String> {
        if self.trial_id.trim().is_empty() {
            return Err("empty trial_id".into());
        }
        let mut seen = BTreeSet::new();
        for v in &self.variables {
            if v.name.is_empty() {
                return Err("empty variable name".into());
            }
            if !registry.contains(&v.name) {
                return Err(format!("unknown variable name `{}`", v.name));
            }
            if !seen.insert(v.name.as_str()) {
                return Err(format!("duplicate variable `{}`", v.name));
            }
        }
        let mut om_ids = BTreeSet::new();
        for om in &self.outcome_measures {
            if !om_ids.insert(om.id.as_str()) {
                return Err(format!("duplicate outcome measure id `{}`", om.id));
            }
        }
        let mut arm_ids = BTreeSet::new();
        for arm in &self.arms {
            if !arm_ids.insert(arm.id.as_str()) {
                return Err(format!("duplicate arm id `{}`", arm.id));
            }
            if arm.arm_kind == ArmKind::Treatment && arm.drug_names.is_empty() {
                return Err(format!("treatment arm `{}` has no drug names", arm.id));
            }
            if let Some(dose) = arm.dose_mg_per_day {
                if !dose.is_finite() || dose < 0.0 {
                    return Err(format!("arm `{}` has invalid dose", arm.id));
                }
            }
        }
        let enrollment = self.enrollment();
        let mut keys = BTreeSet::new();
        for entry in &self.results {
            if !om_ids.contains(entry.outcome_measure_id.as_str()) {
                return Err("dangling outcome measure reference".into());
            }
            if !arm_ids.contains(entry.arm_id.as_str()) {
                return Err("dangling arm reference".into());
            }
            if !keys.insert((entry.outcome_measure_id.as_str(), entry.arm_id.as_str())) {
                return Err(format!(
                    "duplicate result for ({}, {})",
                    entry.outcome_measure_id, entry.arm_id
                ));
            }
            if let Some(n) = enrollment {
                if entry.result.n_analyzed as f64 > n {
                    return Err(format!(
                        "n_analyzed {} exceeds enrollment {}",
                        entry.result.n_analyzed, n
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Closed set of trial-level variable names accepted by a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariableRegistry {
    names: BTreeSet<String>,
}

impl VariableRegistry {
    pub fn new<I, S>(names: I) -> Result<Self, TrialError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for name in names {
            let name = name.into();
            if name.trim().is_empty() {
                return Err(TrialError::InvalidRegistry("empty variable name".into()));
            }
            if name == OUTCOME_MEASURE || name == ARM {
                return Err(TrialError::InvalidRegistry(format!(
                    "`{name}` is reserved"
                )));
            }
            if !set.insert(name.clone()) {
                return Err(TrialError::InvalidRegistry(format!("duplicate `{name}`")));
            }
        }
        Ok(Self { names: set })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// Registered names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Registered variables followed by the outcome-measure and arm pseudo-variables.
    pub fn all_perturbable(&self) -> Vec<String> {
        let mut out: Vec<String> = self.names.iter().cloned().collect();
        out.push(OUTCOME_MEASURE.to_string());
        out.push(ARM.to_string());
        out
    }
}

/// Reference to a trial unit: `trial_id/outcome_measure_id/arm_id`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitRef {
    pub trial_id: String,
    pub outcome_measure_id: String,
    pub arm_id: String,
}

impl UnitRef {
    pub fn new(
        trial_id: impl Into<String>,
        outcome_measure_id: impl Into<String>,
        arm_id: impl Into<String>,
    ) -> Self {
        Self {
            trial_id: trial_id.into(),
            outcome_measure_id: outcome_measure_id.into(),
            arm_id: arm_id.into(),
        }
    }
}

impl fmt::Display for UnitRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.trial_id, self.outcome_measure_id, self.arm_id)
    }
}

impl FromStr for UnitRef {
    type Err = TrialError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            [t, o, a] if !t.is_empty() && !o.is_empty() && !a.is_empty() => {
                Ok(UnitRef::new(*t, *o, *a))
            }
            _ => Err(TrialError::MalformedUnitRef(s.to_string())),
        }
    }
}

/// Ordinal index into the K-state result alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResultState(pub usize);

impl ResultState {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    ExternalLlm,
    None,
}

/// Free-text explanation attached to a training pair. Never used at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub text: String,
    pub step_index: usize,
    pub source: TraceSource,
}

/// Maps reported results to the K-state ordinal alphabet.
///
/// The effect score is the raw value re-signed by the outcome measure's
/// direction of benefit and divided by the configured scale for its unit.
/// Bins are left-closed/right-open over `edges`, so a score sitting exactly
/// on an edge falls in the higher bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    pub labels: Vec<String>,
    pub edges: Vec<f64>,
    pub unit_scales: BTreeMap<String, f64>,
}

impl Default for Discretization {
    fn default() -> Self {
        Self {
            labels: ["strong_negative", "negative", "null", "positive", "strong_positive"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            edges: vec![-1.5, -0.5, 0.5, 1.5],
            unit_scales: [("%", 10.0), ("points", 1.0), ("mmHg", 5.0), ("ratio", 0.25)]
                .iter()
                .map(|(u, s)| (u.to_string(), *s))
                .collect(),
        }
    }
}

impl Discretization {
    pub fn new(
        labels: Vec<String>,
        edges: Vec<f64>,
        unit_scales: BTreeMap<String, f64>,
    ) -> Result<Self, TrialError> {
        let d = Self {
            labels,
            edges,
            unit_scales,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), TrialError> {
        let bad = |m: String| Err(TrialError::InvalidDiscretization(m));
        if self.labels.len() < 2 {
            return bad(format!("need K >= 2 labels, got {}", self.labels.len()));
        }
        let distinct: BTreeSet<&String> = self.labels.iter().collect();
        if distinct.len() != self.labels.len() {
            return bad("labels must be distinct".into());
        }
        if self.edges.len() + 1 != self.labels.len() {
            return bad(format!(
                "{} labels need {} edges, got {}",
                self.labels.len(),
                self.labels.len() - 1,
                self.edges.len()
            ));
        }
        if self.edges.iter().any(|e| !e.is_finite()) {
            return bad("edges must be finite".into());
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return bad("edges must be strictly increasing".into());
        }
        if let Some((u, _)) = self
            .unit_scales
            .iter()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            return bad(format!("scale for unit `{u}` must be positive"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, state: ResultState) -> Option<&str> {
        self.labels.get(state.0).map(String::as_str)
    }

    pub fn effect_score(&self, r: &ResultRecord, om: &OutcomeMeasure) -> Result<f64, TrialError> {
        let value = r
            .value
            .filter(|v| v.is_finite())
            .ok_or(TrialError::UnresolvableResult)?;
        let scale = self
            .unit_scales
            .get(&r.unit)
            .ok_or_else(|| TrialError::UnitNotNormalizable(r.unit.clone()))?;
        let signed = match om.direction {
            Direction::HigherIsBetter => value,
            Direction::LowerIsBetter => -value,
        };
        Ok(signed / scale)
    }

    /// The unique bin containing `score`.
    pub fn bin(&self, score: f64) -> ResultState {
        ResultState(self.edges.partition_point(|e| *e <= score))
    }

    pub fn discretize(&self, r: &ResultRecord, om: &OutcomeMeasure) -> Result<ResultState, TrialError> {
        self.effect_score(r, om).map(|s| self.bin(s))
    }
}

/// A resolved trial unit: trial-level variables plus the selected outcome
/// measure and arm. Equality ignores `trial_id`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trial_id: String,
    pub variables: BTreeMap<String, TrialVariable>,
    pub outcome_measure: OutcomeMeasure,
    pub arm: StudyArm,
}

impl PartialEq for TrialConfig {
    fn eq(&self, other: &Self) -> bool {
        self.variables == other.variables
            && self.outcome_measure == other.outcome_measure
            && self.arm == other.arm
    }
}

impl TrialConfig {
    pub fn unit(&self) -> UnitRef {
        UnitRef::new(&self.trial_id, &self.outcome_measure.id, &self.arm.id)
    }

    /// Copy of `self` with one variable (or the outcome measure / arm) taken from `other`.
    pub fn with_variable_from(&self, name: &str, other: &TrialConfig) -> TrialConfig {
        let mut next = self.clone();
        match name {
            OUTCOME_MEASURE => next.outcome_measure = other.outcome_measure.clone(),
            ARM => next.arm = other.arm.clone(),
            _ => match other.variables.get(name) {
                Some(v) => {
                    next.variables.insert(name.to_string(), v.clone());
                }
                None => {
                    next.variables.remove(name);
                }
            },
        }
        next
    }

    pub fn variable_value(&self, name: &str) -> Option<&TrialVariable> {
        self.variables.get(name)
    }
}

/// Names of the variables on which two configs differ. The outcome measure
/// and the arm each count as a single variable.
pub fn config_diff(a: &TrialConfig, b: &TrialConfig) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let names: BTreeSet<&String> = a.variables.keys().chain(b.variables.keys()).collect();
    for name in names {
        if a.variables.get(name) != b.variables.get(name) {
            out.insert(name.clone());
        }
    }
    if a.outcome_measure != b.outcome_measure {
        out.insert(OUTCOME_MEASURE.to_string());
    }
    if a.arm != b.arm {
        out.insert(ARM.to_string());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub trial_id: Option<String>,
    pub reason: String,
}

/// Immutable, trial-id indexed collection of validated records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    records: BTreeMap<String, TrialRecord>,
}

impl Corpus {
    pub fn from_records(records: impl IntoIterator<Item = TrialRecord>) -> Self {
        Self {
            records: records
                .into_iter()
                .map(|r| (r.trial_id.clone(), r))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, trial_id: &str) -> Option<&TrialRecord> {
        self.records.get(trial_id)
    }

    /// Records in trial-id order.
    pub fn iter(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records.values()
    }

    /// Every unit with a reported result, sorted.
    pub fn units(&self) -> Vec<UnitRef> {
        let mut units: Vec<UnitRef> = self
            .iter()
            .flat_map(|r| {
                r.results
                    .iter()
                    .map(|e| UnitRef::new(&r.trial_id, &e.outcome_measure_id, &e.arm_id))
            })
            .collect();
        units.sort();
        units
    }

    pub fn result(&self, unit: &UnitRef) -> Option<&ResultRecord> {
        self.get(&unit.trial_id)
            .and_then(|r| r.result(&unit.outcome_measure_id, &unit.arm_id))
    }

    pub fn config(&self, unit: &UnitRef) -> Result<TrialConfig, TrialError> {
        let unresolved = || TrialError::UnresolvedUnit(unit.clone());
        let rec = self.get(&unit.trial_id).ok_or_else(unresolved)?;
        let om = rec.outcome_measure(&unit.outcome_measure_id).ok_or_else(unresolved)?;
        let arm = rec.arm(&unit.arm_id).ok_or_else(unresolved)?;
        Ok(TrialConfig {
            trial_id: rec.trial_id.clone(),
            variables: rec
                .variables
                .iter()
                .map(|v| (v.name.clone(), v.clone()))
                .collect(),
            outcome_measure: om.clone(),
            arm: arm.clone(),
        })
    }

    /// Discretized observed state of a unit.
    pub fn state(&self, unit: &UnitRef, bins: &Discretization) -> Result<ResultState, TrialError> {
        let rec = self
            .get(&unit.trial_id)
            .ok_or_else(|| TrialError::UnresolvedUnit(unit.clone()))?;
        let om = rec
            .outcome_measure(&unit.outcome_measure_id)
            .ok_or_else(|| TrialError::UnresolvedUnit(unit.clone()))?;
        let r = rec
            .result(&unit.outcome_measure_id, &unit.arm_id)
            .ok_or_else(|| TrialError::UnresolvedUnit(unit.clone()))?;
        bins.discretize(r, om)
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W, schema_version: &str) -> Result<(), TrialError> {
        let map_io = |e| TrialError::io(Path::new("<corpus output>"), e);
        writeln!(w, "{SCHEMA_PREFIX}{schema_version}").map_err(map_io)?;
        for rec in self.records.values() {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(map_io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, schema_version: &str) -> Result<(), TrialError> {
        let f = File::create(path).map_err(|e| TrialError::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_ndjson(&mut w, schema_version)?;
        w.flush().map_err(|e| TrialError::io(path, e))
    }
}

#[derive(Clone, Debug, Default)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    pub rejects: Vec<Reject>,
}

/// Parses a corpus stream. An empty stream yields an empty corpus; otherwise
/// the first non-blank line must be the schema header.
pub fn parse_corpus<R: BufRead>(
    reader: R,
    schema_version: &str,
    registry: &VariableRegistry,
) -> Result<IngestOutcome, TrialError> {
    let mut out = IngestOutcome::default();
    let mut header_seen = false;
    let mut records = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| TrialError::io(Path::new("<corpus>"), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !header_seen {
            let expected = format!("{SCHEMA_PREFIX}{schema_version}");
            if trimmed != expected {
                return Err(TrialError::SchemaMismatch {
                    expected: schema_version.to_string(),
                    found: trimmed.to_string(),
                });
            }
            header_seen = true;
            continue;
        }
        let rec: TrialRecord = match serde_json::from_str(trimmed) {
            Ok(r) => r,
            Err(e) => {
                let trial_id = serde_json::from_str::<serde_json::Value>(trimmed)
                    .ok()
                    .and_then(|v| v.get("trial_id").and_then(|t| t.as_str()).map(String::from));
                out.rejects.push(Reject {
                    line: line_no,
                    trial_id,
                    reason: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        if records.contains_key(&rec.trial_id) {
            out.rejects.push(Reject {
                line: line_no,
                trial_id: Some(rec.trial_id),
                reason: "duplicate trial_id".into(),
            });
            continue;
        }
        if let Err(reason) = rec.validate(registry) {
            out.rejects.push(Reject {
                line: line_no,
                trial_id: Some(rec.trial_id),
                reason,
            });
            continue;
        }
        records.insert(rec.trial_id.clone(), rec);
    }
    for r in &out.rejects {
        log::warn!(
            "line {}: rejected {}: {}",
            r.line,
            r.trial_id.as_deref().unwrap_or("<unknown>"),
            r.reason
        );
    }
    out.corpus = Corpus { records };
    Ok(out)
}

pub fn ingest_corpus(
    path: &Path,
    schema_version: &str,
    registry: &VariableRegistry,
) -> Result<IngestOutcome, TrialError> {
    let f = File::open(path).map_err(|e| TrialError::io(path, e))?;
    parse_corpus(BufReader::new(f), schema_version, registry)
}

pub fn write_reject_log<W: Write>(w: W, rejects: &[Reject]) -> Result<(), TrialError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["line", "trial_id", "reason"])?;
    for r in rejects {
        csv.write_record([
            r.line.to_string(),
            r.trial_id.clone().unwrap_or_default(),
            r.reason.clone(),
        ])?;
    }
    csv.flush().map_err(|e| TrialError::io(Path::new("<reject log>"), e))?;
    Ok(())
}
