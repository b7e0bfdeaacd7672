//! Verifiers, benchmark questions, the two perturbation evaluation sets and
//! classification metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::learn::{GrpoPrompt, LearnError, TerminalReward};
use crate::pair_miner::same_primary_drug;
use crate::similarity::{cosine_values, unit_variable_text, Embedder, SimilarityError};
use crate::trial_model::{Corpus, Discretization, ResultState, TrialError, UnitRef, OUTCOME_MEASURE};

pub const YES: &str = "yes";
pub const NO: &str = "no";
pub const A_BETTER: &str = "A better";
pub const B_BETTER: &str = "B better";
pub const NO_DIFFERENCE: &str = "no difference";

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("unknown verifier `{0}`")]
    UnknownVerifier(String),
    #[error("state {state} outside alphabet of size {k}")]
    StateOutOfRange { state: usize, k: usize },
    #[error("verifier `{0}` expects a {1} input")]
    WrongInput(String, &'static str),
    #[error("invalid verifier `{0}`: {1}")]
    InvalidVerifier(String, String),
    #[error("prediction for unknown question `{0}`")]
    UnknownQuestion(String),
    #[error("duplicate prediction for question `{0}`")]
    DuplicatePrediction(String),
    #[error("label `{label}` is not a choice of question `{question}`")]
    LabelNotInChoices { question: String, label: String },
    #[error("invalid question `{0}`: {1}")]
    InvalidQuestion(String, String),
    #[error("no predictions to evaluate")]
    Empty,
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Trial(#[from] TrialError),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionClass {
    Superiority,
    ComparativeEffect,
}

impl QuestionClass {
    pub fn default_choices(self) -> Vec<String> {
        match self {
            QuestionClass::Superiority => vec![YES.into(), NO.into()],
            QuestionClass::ComparativeEffect => {
                vec![A_BETTER.into(), B_BETTER.into(), NO_DIFFERENCE.into()]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkQuestion {
    pub id: String,
    pub class: QuestionClass,
    pub target_unit: UnitRef,
    pub choices: Vec<String>,
    pub gold: String,
    /// Unit with an observed result to imagine from, when fixed by the benchmark.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_unit: Option<UnitRef>,
    /// Arm B of a comparative question (arm A is the target arm).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparator_arm_id: Option<String>,
    #[serde(default)]
    pub split: Split,
}

impl BenchmarkQuestion {
    pub fn validate(&self, corpus: &Corpus) -> Result<(), RewardError> {
        let bad = |m: String| Err(RewardError::InvalidQuestion(self.id.clone(), m));
        if !self.choices.contains(&self.gold) {
            return bad(format!("gold `{}` not among choices", self.gold));
        }
        if corpus.result(&self.target_unit).is_none() {
            return bad(format!("target unit {} does not resolve", self.target_unit));
        }
        if self.class == QuestionClass::ComparativeEffect && self.comparator_arm_id.is_none() {
            return bad("comparative question without comparator arm".into());
        }
        Ok(())
    }

    pub fn comparator_unit(&self) -> Option<UnitRef> {
        self.comparator_arm_id.as_ref().map(|arm| UnitRef {
            arm_id: arm.clone(),
            ..self.target_unit.clone()
        })
    }
}

pub fn read_questions<R: BufRead>(r: R) -> Result<Vec<BenchmarkQuestion>, RewardError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| RewardError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_questions<W: Write>(mut w: W, questions: &[BenchmarkQuestion]) -> Result<(), RewardError> {
    for q in questions {
        serde_json::to_writer(&mut w, q).map_err(|source| RewardError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------- verifiers

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierSpec {
    pub id: String,
    pub class: QuestionClass,
    /// Alphabet size the verifier is total over.
    pub k: usize,
    /// Superiority: states at or above this index answer "yes".
    #[serde(default)]
    pub threshold: usize,
}

impl VerifierSpec {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.k < 2 {
            return Err(RewardError::InvalidVerifier(self.id.clone(), "k must be >= 2".into()));
        }
        if self.class == QuestionClass::Superiority && self.threshold >= self.k {
            return Err(RewardError::InvalidVerifier(
                self.id.clone(),
                format!("threshold {} outside alphabet of size {}", self.threshold, self.k),
            ));
        }
        Ok(())
    }

    fn check(&self, s: ResultState) -> Result<usize, RewardError> {
        if s.0 < self.k {
            Ok(s.0)
        } else {
            Err(RewardError::StateOutOfRange { state: s.0, k: self.k })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifierInput {
    Single(ResultState),
    /// (arm A, arm B)
    Pair(ResultState, ResultState),
}

pub fn verify(spec: &VerifierSpec, input: VerifierInput) -> Result<&'static str, RewardError> {
    match (spec.class, input) {
        (QuestionClass::Superiority, VerifierInput::Single(s)) => {
            Ok(if spec.check(s)? >= spec.threshold { YES } else { NO })
        }
        (QuestionClass::ComparativeEffect, VerifierInput::Pair(a, b)) => {
            Ok(match spec.check(a)?.cmp(&spec.check(b)?) {
                std::cmp::Ordering::Greater => A_BETTER,
                std::cmp::Ordering::Less => B_BETTER,
                std::cmp::Ordering::Equal => NO_DIFFERENCE,
            })
        }
        (QuestionClass::Superiority, _) => Err(RewardError::WrongInput(spec.id.clone(), "single-state")),
        (QuestionClass::ComparativeEffect, _) => Err(RewardError::WrongInput(spec.id.clone(), "state-pair")),
    }
}

pub fn reward(spec: &VerifierSpec, input: VerifierInput, gold: &str) -> Result<f64, RewardError> {
    Ok(if verify(spec, input)? == gold { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifierRegistry {
    specs: BTreeMap<String, VerifierSpec>,
}

impl VerifierRegistry {
    pub fn new(specs: impl IntoIterator<Item = VerifierSpec>) -> Result<Self, RewardError> {
        let mut map = BTreeMap::new();
        for s in specs {
            s.validate()?;
            if map.insert(s.id.clone(), s.clone()).is_some() {
                return Err(RewardError::InvalidVerifier(s.id, "duplicate id".into()));
            }
        }
        Ok(Self { specs: map })
    }

    /// One verifier per class, ids `superiority` and `comparative_effect`.
    pub fn standard(k: usize, superiority_threshold: usize) -> Result<Self, RewardError> {
        Self::new([
            VerifierSpec {
                id: verifier_id(QuestionClass::Superiority).into(),
                class: QuestionClass::Superiority,
                k,
                threshold: superiority_threshold,
            },
            VerifierSpec {
                id: verifier_id(QuestionClass::ComparativeEffect).into(),
                class: QuestionClass::ComparativeEffect,
                k,
                threshold: 0,
            },
        ])
    }

    pub fn get(&self, id: &str) -> Result<&VerifierSpec, RewardError> {
        self.specs.get(id).ok_or_else(|| RewardError::UnknownVerifier(id.to_string()))
    }

    /// Label for a terminal state, pairing it with the comparator state for
    /// comparative verifiers.
    pub fn label(
        &self,
        verifier_id: &str,
        terminal: ResultState,
        comparator: Option<ResultState>,
    ) -> Result<&'static str, RewardError> {
        let spec = self.get(verifier_id)?;
        let input = match (spec.class, comparator) {
            (QuestionClass::ComparativeEffect, Some(b)) => VerifierInput::Pair(terminal, b),
            (QuestionClass::ComparativeEffect, None) => {
                return Err(RewardError::WrongInput(spec.id.clone(), "state-pair"))
            }
            _ => VerifierInput::Single(terminal),
        };
        verify(spec, input)
    }
}

pub fn verifier_id(class: QuestionClass) -> &'static str {
    match class {
        QuestionClass::Superiority => "superiority",
        QuestionClass::ComparativeEffect => "comparative_effect",
    }
}

impl TerminalReward for VerifierRegistry {
    fn reward(&self, prompt: &GrpoPrompt, terminal: ResultState) -> Result<f64, LearnError> {
        let label = self
            .label(&prompt.verifier_id, terminal, prompt.comparator_state)
            .map_err(|e| LearnError::Reward(e.to_string()))?;
        Ok(if label == prompt.gold_label { 1.0 } else { 0.0 })
    }
}

// ---------------------------------------------------------------- eval sets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Outcome,
    Arm,
}

impl std::str::FromStr for EvalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "outcome" => Ok(EvalKind::Outcome),
            "arm" => Ok(EvalKind::Arm),
            other => Err(format!("unknown eval-set kind `{other}` (expected outcome|arm)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question_id: String,
    pub kind: EvalKind,
    pub target: UnitRef,
    /// Unit whose reported result seeds the imagination.
    pub partner: UnitRef,
    pub partner_state: ResultState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedQuestion {
    pub question_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub kind: EvalKind,
    pub items: Vec<EvalItem>,
    pub dropped: Vec<DroppedQuestion>,
}

impl EvalSet {
    pub fn write_items<W: Write>(&self, mut w: W) -> Result<(), RewardError> {
        for it in &self.items {
            serde_json::to_writer(&mut w, it).map_err(|source| RewardError::Json { line: 0, source })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_dropped<W: Write>(&self, w: W) -> Result<(), RewardError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["question_id", "reason"])?;
        for d in &self.dropped {
            wr.write_record([&d.question_id, &d.reason])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn read_eval_items<R: BufRead>(r: R) -> Result<Vec<EvalItem>, RewardError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|source| RewardError::Json { line: i + 1, source })?);
        }
    }
    Ok(out)
}

fn drop_question(dropped: &mut Vec<DroppedQuestion>, q: &BenchmarkQuestion, reason: String) {
    log::info!("dropping question {}: {reason}", q.id);
    dropped.push(DroppedQuestion {
        question_id: q.id.clone(),
        reason,
    });
}

/// Units in the target's trial that could stand in as partner, with
/// resolvable results. `same_arm` selects alternative outcome measures under
/// the target arm; otherwise alternative arms under the target measure.
fn partner_candidates(
    corpus: &Corpus,
    bins: &Discretization,
    target: &UnitRef,
    same_arm: bool,
) -> Vec<(UnitRef, ResultState)> {
    let Some(trial) = corpus.get(&target.trial_id) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for entry in &trial.results {
        let unit = UnitRef::new(&trial.trial_id, &entry.outcome_measure_id, &entry.arm_id);
        let keep = if same_arm {
            entry.arm_id == target.arm_id && entry.outcome_measure_id != target.outcome_measure_id
        } else {
            entry.outcome_measure_id == target.outcome_measure_id && entry.arm_id != target.arm_id
        };
        if !keep {
            continue;
        }
        match corpus.state(&unit, bins) {
            Ok(s) => out.push((unit, s)),
            Err(e) => log::debug!("partner {unit} skipped: {e}"),
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Pairs each question's target with the most similar alternative outcome
/// measure (title and timeframe) under the same arm. Equal cosines resolve
/// to the lower outcome-measure id.
pub fn build_outcome_perturbation_set(
    corpus: &Corpus,
    questions: &[BenchmarkQuestion],
    bins: &Discretization,
    embedder: &dyn Embedder,
) -> Result<EvalSet, RewardError> {
    let mut items = Vec::new();
    let mut dropped = Vec::new();
    for q in questions {
        let target_cfg = match corpus.config(&q.target_unit) {
            Ok(c) => c,
            Err(e) => {
                drop_question(&mut dropped, q, format!("target does not resolve: {e}"));
                continue;
            }
        };
        let candidates = partner_candidates(corpus, bins, &q.target_unit, true);
        if candidates.is_empty() {
            drop_question(&mut dropped, q, "no alternative outcome measure".into());
            continue;
        }
        let mut texts = vec![unit_variable_text(&target_cfg, OUTCOME_MEASURE).unwrap_or_default()];
        for (u, _) in &candidates {
            texts.push(unit_variable_text(&corpus.config(u)?, OUTCOME_MEASURE).unwrap_or_default());
        }
        let embs = embedder.embed_batch(OUTCOME_MEASURE, &texts)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in embs[1..].iter().enumerate() {
            let c = cosine_values(&embs[0], e)?;
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((i, c));
            }
        }
        let (i, c) = best.expect("non-empty candidates");
        items.push(EvalItem {
            question_id: q.id.clone(),
            kind: EvalKind::Outcome,
            target: q.target_unit.clone(),
            partner: candidates[i].0.clone(),
            partner_state: candidates[i].1,
            cosine: Some(c),
        });
    }
    Ok(EvalSet {
        kind: EvalKind::Outcome,
        items,
        dropped,
    })
}

/// Pairs each question's target arm with another arm of the same trial
/// measured under the same outcome: the first same-drug arm by id, else
/// the first arm by id.
pub fn build_arm_perturbation_set(
    corpus: &Corpus,
    questions: &[BenchmarkQuestion],
    bins: &Discretization,
) -> Result<EvalSet, RewardError> {
    let mut items = Vec::new();
    let mut dropped = Vec::new();
    for q in questions {
        let target_cfg = match corpus.config(&q.target_unit) {
            Ok(c) => c,
            Err(e) => {
                drop_question(&mut dropped, q, format!("target does not resolve: {e}"));
                continue;
            }
        };
        let candidates = partner_candidates(corpus, bins, &q.target_unit, false);
        let mut chosen = None;
        for (u, s) in &candidates {
            if same_primary_drug(&corpus.config(u)?.arm, &target_cfg.arm) {
                chosen = Some((u, s));
                break;
            }
        }
        let Some((u, s)) = chosen.or_else(|| candidates.first().map(|(u, s)| (u, s))) else {
            drop_question(&mut dropped, q, "no second arm under the same outcome measure".into());
            continue;
        };
        items.push(EvalItem {
            question_id: q.id.clone(),
            kind: EvalKind::Arm,
            target: q.target_unit.clone(),
            partner: u.clone(),
            partner_state: *s,
            cosine: None,
        });
    }
    Ok(EvalSet {
        kind: EvalKind::Arm,
        items,
        dropped,
    })
}

// ---------------------------------------------------------------- metrics

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    /// Percentages, two decimals.
    pub macro_f1: f64,
    pub weighted_accuracy: f64,
    pub balanced_accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub labels: Vec<String>,
    /// Rows are gold labels, columns predicted labels, both in `labels` order.
    pub confusion: Vec<Vec<usize>>,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Metrics from a confusion matrix whose rows are gold labels.
/// Labels with neither gold nor predicted instances are left out.
pub fn metrics_from_confusion(labels: &[String], confusion: &[Vec<usize>]) -> Result<Metrics, RewardError> {
    let k = labels.len();
    let mut per_class = Vec::new();
    let mut keep = Vec::new();
    for i in 0..k {
        let support: usize = confusion[i].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[i]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        keep.push(i);
        let tp = confusion[i][i] as f64;
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassReport {
            label: labels[i].clone(),
            precision,
            recall,
            f1,
            support,
            predicted,
        });
    }
    let n: usize = per_class.iter().map(|c| c.support).sum();
    if n == 0 {
        return Err(RewardError::Empty);
    }
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    let weighted = per_class.iter().map(|c| c.recall * c.support as f64).sum::<f64>() / n as f64;
    let with_support: Vec<&ClassReport> = per_class.iter().filter(|c| c.support > 0).collect();
    let balanced = with_support.iter().map(|c| c.recall).sum::<f64>() / with_support.len() as f64;
    Ok(Metrics {
        n,
        macro_f1: round2(100.0 * macro_f1),
        weighted_accuracy: round2(100.0 * weighted),
        balanced_accuracy: round2(100.0 * balanced),
        labels: keep.iter().map(|&i| labels[i].clone()).collect(),
        confusion: keep.iter().map(|&i| keep.iter().map(|&j| confusion[i][j]).collect()).collect(),
        per_class,
    })
}

/// Scores predictions against the gold questions they reference.
pub fn evaluate(predictions: &[Prediction], gold: &[BenchmarkQuestion]) -> Result<Metrics, RewardError> {
    let by_id: BTreeMap<&str, &BenchmarkQuestion> = gold.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(predictions.len());
    for p in predictions {
        let q = by_id
            .get(p.question_id.as_str())
            .ok_or_else(|| RewardError::UnknownQuestion(p.question_id.clone()))?;
        if !seen.insert(p.question_id.as_str()) {
            return Err(RewardError::DuplicatePrediction(p.question_id.clone()));
        }
        if !q.choices.contains(&p.label) {
            return Err(RewardError::LabelNotInChoices {
                question: q.id.clone(),
                label: p.label.clone(),
            });
        }
        pairs.push((q.gold.as_str(), p.label.as_str()));
    }
    if pairs.is_empty() {
        return Err(RewardError::Empty);
    }
    let labels: Vec<String> = pairs
        .iter()
        .flat_map(|(g, p)| [*g, *p])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
    for (g, p) in pairs {
        confusion[index[g]][index[p]] += 1;
    }
    metrics_from_confusion(&labels, &confusion)
}

/// Per-question CSV: id, class, gold, predicted, correct.
pub fn write_per_question<W: Write>(
    w: W,
    predictions: &[Prediction],
    gold: &[BenchmarkQuestion],
) -> Result<(), RewardError> {
    let by_id: BTreeMap<&str, &BenchmarkQuestion> = gold.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["question_id", "class", "gold", "predicted", "correct"])?;
    for p in predictions {
        let q = by_id
            .get(p.question_id.as_str())
            .ok_or_else(|| RewardError::UnknownQuestion(p.question_id.clone()))?;
        let class = match q.class {
            QuestionClass::Superiority => "superiority",
            QuestionClass::ComparativeEffect => "comparative_effect",
        };
        let correct = if q.gold == p.label { "1" } else { "0" };
        wr.write_record([q.id.as_str(), class, q.gold.as_str(), p.label.as_str(), correct])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::OfflineEmbedder;
    use crate::trial_model::{parse_corpus, tests::registry};
    use serde_json::json;

    fn sup(threshold: usize) -> VerifierSpec {
        VerifierSpec {
            id: "s".into(),
            class: QuestionClass::Superiority,
            k: 5,
            threshold,
        }
    }

    #[test]
    fn superiority_truth_table() {
        let expected = [NO, NO, NO, YES, YES];
        for (s, e) in expected.iter().enumerate() {
            assert_eq!(verify(&sup(3), VerifierInput::Single(ResultState(s))).unwrap(), *e);
        }
        assert!(verify(&sup(3), VerifierInput::Single(ResultState(5))).is_err());
        assert!(verify(&sup(3), VerifierInput::Pair(ResultState(1), ResultState(2))).is_err());
        assert!(sup(5).validate().is_err());
    }

    #[test]
    fn comparative_rule() {
        let spec = VerifierSpec {
            id: "c".into(),
            class: QuestionClass::ComparativeEffect,
            k: 5,
            threshold: 0,
        };
        let v = |a, b| verify(&spec, VerifierInput::Pair(ResultState(a), ResultState(b))).unwrap();
        assert_eq!(v(2, 2), NO_DIFFERENCE);
        assert_eq!(v(3, 1), A_BETTER);
        assert_eq!(v(0, 4), B_BETTER);
    }

    #[test]
    fn reward_preimage_sizes() {
        let spec = sup(3);
        for (gold, size) in [(YES, 2.0), (NO, 3.0)] {
            let total: f64 = (0..5)
                .map(|s| reward(&spec, VerifierInput::Single(ResultState(s)), gold).unwrap())
                .sum();
            assert_eq!(total, size);
        }
    }

    #[test]
    fn registry_as_terminal_reward() {
        use crate::imagination::CounterfactualPath;
        let reg = VerifierRegistry::standard(5, 3).unwrap();
        let prompt = GrpoPrompt {
            question_id: "q".into(),
            source_result: ResultState(0),
            path: CounterfactualPath {
                configs: vec![],
                perturbed_variables: vec![],
            },
            gold_label: A_BETTER.into(),
            verifier_id: "comparative_effect".into(),
            comparator_state: Some(ResultState(2)),
        };
        assert_eq!(reg.reward(&prompt, ResultState(3)).unwrap(), 1.0);
        assert_eq!(reg.reward(&prompt, ResultState(2)).unwrap(), 0.0);
        let missing = GrpoPrompt { comparator_state: None, ..prompt.clone() };
        assert!(reg.reward(&missing, ResultState(3)).is_err());
        let unknown = GrpoPrompt { verifier_id: "nope".into(), ..prompt };
        assert!(reg.reward(&unknown, ResultState(3)).is_err());
    }

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn confusion_fixture() {
        let m = metrics_from_confusion(&labels(&["a", "b"]), &[vec![3, 1], vec![2, 4]]).unwrap();
        assert!((m.per_class[0].f1 - 0.6667).abs() < 5e-5);
        assert!((m.per_class[1].f1 - 0.7273).abs() < 5e-5);
        assert_eq!(m.macro_f1, 69.70);
        assert_eq!(m.weighted_accuracy, 70.00);
        assert_eq!(m.balanced_accuracy, 70.83);
    }

    fn q(id: &str, gold: &str) -> BenchmarkQuestion {
        BenchmarkQuestion {
            id: id.into(),
            class: QuestionClass::Superiority,
            target_unit: UnitRef::new("T", "O", "A"),
            choices: labels(&[YES, NO]),
            gold: gold.into(),
            source_unit: None,
            comparator_arm_id: None,
            split: Split::Eval,
        }
    }

    fn pred(id: &str, label: &str) -> Prediction {
        Prediction {
            question_id: id.into(),
            label: label.into(),
        }
    }

    #[test]
    fn evaluate_perfect_and_constant() {
        let gold = vec![q("1", YES), q("2", NO), q("3", NO), q("4", YES)];
        let perfect: Vec<Prediction> = gold.iter().map(|g| pred(&g.id, &g.gold)).collect();
        let m = evaluate(&perfect, &gold).unwrap();
        assert_eq!((m.macro_f1, m.weighted_accuracy), (100.0, 100.0));
        let constant: Vec<Prediction> = gold.iter().map(|g| pred(&g.id, YES)).collect();
        let m = evaluate(&constant, &gold).unwrap();
        let yes = m.per_class.iter().find(|c| c.label == YES).unwrap();
        let no = m.per_class.iter().find(|c| c.label == NO).unwrap();
        assert_eq!((yes.recall, no.recall), (1.0, 0.0));
        // yes: p = 0.5, r = 1 -> f1 = 2/3; no: f1 = 0
        assert_eq!(m.macro_f1, 33.33);
        assert_eq!(m.weighted_accuracy, 50.0);
    }

    #[test]
    fn evaluate_errors_and_order_invariance() {
        let gold = vec![q("1", YES), q("2", NO), q("3", NO)];
        assert!(matches!(evaluate(&[pred("9", YES)], &gold), Err(RewardError::UnknownQuestion(_))));
        assert!(matches!(
            evaluate(&[pred("1", YES), pred("1", NO)], &gold),
            Err(RewardError::DuplicatePrediction(_))
        ));
        assert!(matches!(evaluate(&[pred("1", "maybe")], &gold), Err(RewardError::LabelNotInChoices { .. })));
        let a = vec![pred("1", NO), pred("2", NO), pred("3", YES)];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(evaluate(&a, &gold).unwrap(), evaluate(&b, &gold).unwrap());
    }

    fn trial(id: &str, oms: &[(&str, &str)], arms: &[(&str, &str)]) -> serde_json::Value {
        let mut results = Vec::new();
        for (o, _) in oms {
            for (a, _) in arms {
                results.push(json!({"outcome_measure_id": o, "arm_id": a,
                    "result": {"value": 1.0, "unit": "%", "n_analyzed": 10, "significant": false, "raw_text": "1"}}));
            }
        }
        json!({
            "trial_id": id,
            "variables": [],
            "outcome_measures": oms.iter().map(|(o, t)| json!({"id": o, "title": t, "timeframe": "12 weeks", "kind": "primary", "direction": "higher_is_better"})).collect::<Vec<_>>(),
            "arms": arms.iter().map(|(a, d)| json!({"id": a, "label": a, "drug_names": if d.is_empty() { vec![] } else { vec![*d] }, "dose_text": "", "arm_kind": if d.is_empty() { "comparator" } else { "treatment" }})).collect::<Vec<_>>(),
            "results": results,
        })
    }

    fn corpus(trials: &[serde_json::Value]) -> Corpus {
        let mut text = String::from("#schema:v1\n");
        for t in trials {
            text.push_str(&format!("{t}\n"));
        }
        let out = parse_corpus(text.as_bytes(), "v1", &registry()).unwrap();
        assert!(out.rejects.is_empty(), "{:?}", out.rejects);
        out.corpus
    }

    fn uq(id: &str, t: &str, o: &str, a: &str) -> BenchmarkQuestion {
        BenchmarkQuestion {
            target_unit: UnitRef::new(t, o, a),
            ..q(id, YES)
        }
    }

    #[test]
    fn outcome_eval_set() {
        let c = corpus(&[
            trial("T1", &[("O1", "HbA1c change"), ("O2", "body weight")], &[("A", "metformin")]),
            trial(
                "T2",
                &[("O1", "HbA1c change from baseline"), ("O2", "adverse events"), ("O3", "HbA1c change")],
                &[("A", "metformin")],
            ),
            trial("T3", &[("O1", "HbA1c")], &[("A", "metformin")]),
        ]);
        let bins = Discretization::default();
        let emb = OfflineEmbedder::default();
        let qs = vec![uq("q1", "T1", "O1", "A"), uq("q2", "T2", "O1", "A"), uq("q3", "T3", "O1", "A")];
        let set = build_outcome_perturbation_set(&c, &qs, &bins, &emb).unwrap();
        assert_eq!(set.items.len(), 2);
        assert_eq!(set.items[0].partner.outcome_measure_id, "O2");
        // brute force over the two alternatives of T2/O1
        let text = |o: &str| unit_variable_text(&c.config(&UnitRef::new("T2", o, "A")).unwrap(), OUTCOME_MEASURE).unwrap();
        let t = emb.embed_text(&text("O1")).unwrap();
        let best = ["O2", "O3"]
            .iter()
            .map(|o| (cosine_values(&t, &emb.embed_text(&text(o)).unwrap()).unwrap(), *o))
            .fold((f64::NEG_INFINITY, ""), |b, x| if x.0 > b.0 { x } else { b });
        assert_eq!(set.items[1].partner.outcome_measure_id, best.1);
        assert_eq!(set.items[1].partner.outcome_measure_id, "O3");
        assert_eq!(set.dropped.len(), 1);
        assert_eq!(set.dropped[0].question_id, "q3");
    }

    #[test]
    fn arm_eval_set() {
        let c = corpus(&[
            trial("T1", &[("O1", "x")], &[("A1", "drug a"), ("A2", "drug b")]),
            trial("T2", &[("O1", "x")], &[("A1", ""), ("A2", "drug a 10 mg"), ("A3", "drug a 20 mg")]),
            trial("T3", &[("O1", "x")], &[("A1", "drug a")]),
        ]);
        let bins = Discretization::default();
        let qs = vec![uq("q1", "T1", "O1", "A1"), uq("q2", "T2", "O1", "A3"), uq("q3", "T3", "O1", "A1")];
        let set = build_arm_perturbation_set(&c, &qs, &bins).unwrap();
        assert_eq!(set.items.len(), 2);
        assert_eq!(set.items[0].partner.arm_id, "A2");
        assert_eq!(set.items[1].partner.arm_id, "A2");
        assert_eq!(set.dropped[0].question_id, "q3");
        let mut csv = Vec::new();
        set.write_dropped(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("question_id,reason\n"));
    }

    #[test]
    fn question_io_round_trip() {
        let mut qs = vec![q("1", YES)];
        qs[0].comparator_arm_id = Some("B".into());
        qs[0].split = Split::Train;
        let mut buf = Vec::new();
        write_questions(&mut buf, &qs).unwrap();
        assert_eq!(read_questions(buf.as_slice()).unwrap(), qs);
        let bad = br#"{"id":"1","bogus":1}"#;
        assert!(read_questions(&bad[..]).is_err());
    }
}
