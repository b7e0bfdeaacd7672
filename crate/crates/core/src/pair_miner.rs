//! Natural counterfactual pairs: co-reported units inside one trial that
//! differ only in the outcome measure, or only in a same-drug study arm.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::trial_model::{
    Corpus, Discretization, ReasoningTrace, ResultState, StudyArm, TrialConfig, TrialError,
    TrialRecord, UnitRef,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    OutcomeMeasure,
    Arm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalPair {
    pub kind: PairKind,
    pub source: TrialConfig,
    pub target: TrialConfig,
    pub source_result: ResultState,
    pub target_result: ResultState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<ReasoningTrace>,
}

impl NaturalPair {
    /// Checks the structural invariants of the pair's kind.
    pub fn is_well_formed(&self) -> bool {
        if self.source.trial_id != self.target.trial_id {
            return false;
        }
        match self.kind {
            PairKind::OutcomeMeasure => {
                self.source.arm.id == self.target.arm.id
                    && self.source.outcome_measure.id != self.target.outcome_measure.id
            }
            PairKind::Arm => {
                self.source.outcome_measure.id == self.target.outcome_measure.id
                    && self.source.arm.id != self.target.arm.id
                    && same_primary_drug(&self.source.arm, &self.target.arm)
            }
        }
    }
}

/// One line of the pair output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source_unit: UnitRef,
    pub target_unit: UnitRef,
    pub source_label: String,
    pub target_label: String,
    #[serde(flatten)]
    pub pair: NaturalPair,
}

/// Tokens dropped when canonicalizing a drug name.
const DOSE_ROUTE_TOKENS: &[&str] = &[
    "mg", "ml", "mcg", "ug", "µg", "g", "kg", "iu", "unit", "units", "mg/kg", "mg/m2", "%",
    "daily", "once", "twice", "bid", "tid", "qd", "qid", "qw", "q2w", "q3w", "q4w", "weekly",
    "day", "days", "week", "per", "oral", "orally", "po", "iv", "intravenous", "sc",
    "subcutaneous", "im", "intramuscular", "tablet", "tablets", "capsule", "capsules",
    "injection", "infusion", "dose", "doses",
];

/// Lowercased drug name with dose, unit and route tokens removed.
pub fn canonical_drug_name(name: &str) -> String {
    name.to_lowercase()
        .split(|c: char| c.is_whitespace() || c == ',' || c == '(' || c == ')' || c == ';')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .filter(|t| !t.starts_with(|c: char| c.is_ascii_digit() || c == '.'))
        .filter(|t| !DOSE_ROUTE_TOKENS.contains(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether two arms use primarily the same drug: the canonicalized
/// first-listed drug names must match.
pub fn same_primary_drug(a: &StudyArm, b: &StudyArm) -> bool {
    match (a.drug_names.first(), b.drug_names.first()) {
        (Some(x), Some(y)) => {
            let (x, y) = (canonical_drug_name(x), canonical_drug_name(y));
            !x.is_empty() && x == y
        }
        _ => false,
    }
}

/// Observed states of a trial's units, skipping results that cannot be discretized.
fn trial_states(rec: &TrialRecord, bins: &Discretization) -> BTreeMap<(String, String), ResultState> {
    let mut out = BTreeMap::new();
    for entry in &rec.results {
        let Some(om) = rec.outcome_measure(&entry.outcome_measure_id) else {
            continue;
        };
        match bins.discretize(&entry.result, om) {
            Ok(s) => {
                out.insert((entry.outcome_measure_id.clone(), entry.arm_id.clone()), s);
            }
            Err(e) => log::info!(
                "{}/{}/{}: result dropped from pairing: {e}",
                rec.trial_id,
                entry.outcome_measure_id,
                entry.arm_id
            ),
        }
    }
    out
}

fn sorted_ids<'a, I: Iterator<Item = &'a str>>(ids: I) -> Vec<&'a str> {
    let mut v: Vec<&str> = ids.collect();
    v.sort_unstable();
    v
}

fn make_pair(
    corpus: &Corpus,
    kind: PairKind,
    source: UnitRef,
    target: UnitRef,
    source_result: ResultState,
    target_result: ResultState,
) -> Result<NaturalPair, TrialError> {
    Ok(NaturalPair {
        kind,
        source: corpus.config(&source)?,
        target: corpus.config(&target)?,
        source_result,
        target_result,
        trace: None,
    })
}

/// Every ordered pair of distinct, co-reported outcome measures under the same arm.
pub fn mine_outcome_pairs(corpus: &Corpus, bins: &Discretization) -> Result<Vec<NaturalPair>, TrialError> {
    let mut out = Vec::new();
    for rec in corpus.iter() {
        let states = trial_states(rec, bins);
        let arms = sorted_ids(rec.arms.iter().map(|a| a.id.as_str()));
        let oms = sorted_ids(rec.outcome_measures.iter().map(|o| o.id.as_str()));
        for arm in &arms {
            let reported: Vec<(&str, ResultState)> = oms
                .iter()
                .filter_map(|om| {
                    states
                        .get(&(om.to_string(), arm.to_string()))
                        .map(|s| (*om, *s))
                })
                .collect();
            for (om1, s1) in &reported {
                for (om2, s2) in &reported {
                    if om1 == om2 {
                        continue;
                    }
                    out.push(make_pair(
                        corpus,
                        PairKind::OutcomeMeasure,
                        UnitRef::new(&rec.trial_id, *om1, *arm),
                        UnitRef::new(&rec.trial_id, *om2, *arm),
                        *s1,
                        *s2,
                    )?);
                }
            }
        }
    }
    Ok(out)
}

/// Every ordered pair of distinct same-drug arms reported under a shared outcome measure.
pub fn mine_arm_pairs(corpus: &Corpus, bins: &Discretization) -> Result<Vec<NaturalPair>, TrialError> {
    let mut out = Vec::new();
    for rec in corpus.iter() {
        let states = trial_states(rec, bins);
        let arms = sorted_ids(rec.arms.iter().map(|a| a.id.as_str()));
        let oms = sorted_ids(rec.outcome_measures.iter().map(|o| o.id.as_str()));
        for om in &oms {
            let reported: Vec<(&str, ResultState)> = arms
                .iter()
                .filter_map(|arm| {
                    states
                        .get(&(om.to_string(), arm.to_string()))
                        .map(|s| (*arm, *s))
                })
                .collect();
            for (a1, s1) in &reported {
                for (a2, s2) in &reported {
                    if a1 == a2 {
                        continue;
                    }
                    let (Some(arm1), Some(arm2)) = (rec.arm(a1), rec.arm(a2)) else {
                        continue;
                    };
                    if !same_primary_drug(arm1, arm2) {
                        continue;
                    }
                    out.push(make_pair(
                        corpus,
                        PairKind::Arm,
                        UnitRef::new(&rec.trial_id, *om, *a1),
                        UnitRef::new(&rec.trial_id, *om, *a2),
                        *s1,
                        *s2,
                    )?);
                }
            }
        }
    }
    Ok(out)
}

/// An externally produced explanation for one natural pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub source: UnitRef,
    pub target: UnitRef,
    pub text: String,
    #[serde(default)]
    pub step_index: usize,
}

/// Attaches traces to the pairs they describe; returns how many were attached.
pub fn attach_traces(pairs: &mut [NaturalPair], traces: &[TraceRecord]) -> usize {
    let index: BTreeMap<(UnitRef, UnitRef), &TraceRecord> = traces
        .iter()
        .map(|t| ((t.source.clone(), t.target.clone()), t))
        .collect();
    let mut attached = 0;
    for pair in pairs.iter_mut() {
        if let Some(t) = index.get(&(pair.source.unit(), pair.target.unit())) {
            pair.trace = Some(ReasoningTrace {
                text: t.text.clone(),
                step_index: t.step_index,
                source: crate::trial_model::TraceSource::ExternalLlm,
            });
            attached += 1;
        }
    }
    attached
}

pub fn write_pairs<W: Write>(mut w: W, pairs: &[NaturalPair], bins: &Discretization) -> Result<(), TrialError> {
    for pair in pairs {
        let rec = PairRecord {
            source_unit: pair.source.unit(),
            target_unit: pair.target.unit(),
            source_label: bins.label(pair.source_result).unwrap_or("?").to_string(),
            target_label: bins.label(pair.target_result).unwrap_or("?").to_string(),
            pair: pair.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")
            .map_err(|e| TrialError::io(std::path::Path::new("<pairs>"), e))?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(r: R) -> Result<Vec<NaturalPair>, TrialError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| TrialError::io(std::path::Path::new("<pairs>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)?;
        out.push(rec.pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial_model::{
        ArmKind, OutcomeKind, OutcomeMeasure, ResultEntry, ResultRecord, TrialVariable,
    };

    fn arm(id: &str, drug: &str, kind: ArmKind) -> StudyArm {
        StudyArm {
            id: id.into(),
            label: drug.into(),
            drug_names: if drug.is_empty() { vec![] } else { vec![drug.into()] },
            dose_text: String::new(),
            dose_mg_per_day: None,
            arm_kind: kind,
        }
    }

    fn trial(id: &str, arms: Vec<StudyArm>, n_oms: usize) -> TrialRecord {
        let oms: Vec<OutcomeMeasure> = (0..n_oms)
            .map(|i| OutcomeMeasure {
                id: format!("OM{i}"),
                title: format!("measure {i}"),
                timeframe: String::new(),
                kind: OutcomeKind::Secondary,
                direction: Default::default(),
            })
            .collect();
        let mut results = Vec::new();
        for om in &oms {
            for a in &arms {
                results.push(ResultEntry {
                    outcome_measure_id: om.id.clone(),
                    arm_id: a.id.clone(),
                    result: ResultRecord {
                        value: Some(1.0),
                        unit: "points".into(),
                        n_analyzed: 10,
                        significant: None,
                        raw_text: String::new(),
                    },
                });
            }
        }
        TrialRecord {
            trial_id: id.into(),
            variables: vec![TrialVariable {
                name: "condition".into(),
                value: "asthma".into(),
                numeric_value: None,
            }],
            outcome_measures: oms,
            arms,
            results,
        }
    }

    fn bins() -> Discretization {
        Discretization::default()
    }

    #[test]
    fn canonicalization() {
        assert_eq!(canonical_drug_name("Pembrolizumab 10 mg"), "pembrolizumab");
        assert_eq!(canonical_drug_name("pembrolizumab 20 mg daily"), "pembrolizumab");
        assert_eq!(canonical_drug_name(" Drug A "), "drug a");
        assert_eq!(canonical_drug_name("Metformin 500mg oral tablets"), "metformin");
    }

    #[test]
    fn same_drug_rule() {
        let t = ArmKind::Treatment;
        assert!(same_primary_drug(
            &arm("a", "Pembrolizumab 10 mg", t),
            &arm("b", "pembrolizumab 20 mg daily", t)
        ));
        assert!(same_primary_drug(&arm("a", "Drug A", t), &arm("b", "Drug A", t)));
        assert!(!same_primary_drug(
            &arm("a", "Drug A", t),
            &arm("b", "Placebo", ArmKind::Comparator)
        ));
        assert!(!same_primary_drug(&arm("a", "Drug A", t), &arm("b", "", ArmKind::Comparator)));
    }

    #[test]
    fn outcome_pair_counts() {
        let t = ArmKind::Treatment;
        let one_om = Corpus::from_records([trial("T1", vec![arm("A", "X", t)], 1)]);
        assert_eq!(mine_outcome_pairs(&one_om, &bins()).unwrap().len(), 0);
        let two_om = Corpus::from_records([trial("T1", vec![arm("A", "X", t)], 2)]);
        assert_eq!(mine_outcome_pairs(&two_om, &bins()).unwrap().len(), 2);
        let c = Corpus::from_records([trial(
            "T1",
            vec![arm("A", "X", t), arm("P", "Placebo", ArmKind::Comparator)],
            3,
        )]);
        let pairs = mine_outcome_pairs(&c, &bins()).unwrap();
        assert_eq!(pairs.len(), 12);
        assert!(pairs.iter().all(NaturalPair::is_well_formed));
    }

    #[test]
    fn arm_pair_counts() {
        let t = ArmKind::Treatment;
        let dose = Corpus::from_records([trial(
            "T1",
            vec![arm("A1", "Drug X 10 mg", t), arm("A2", "Drug X 20 mg", t)],
            1,
        )]);
        assert_eq!(mine_arm_pairs(&dose, &bins()).unwrap().len(), 2);
        let placebo = Corpus::from_records([trial(
            "T1",
            vec![arm("A1", "Drug X", t), arm("P", "Placebo", ArmKind::Comparator)],
            1,
        )]);
        assert_eq!(mine_arm_pairs(&placebo, &bins()).unwrap().len(), 0);
        let three = Corpus::from_records([trial(
            "T1",
            vec![
                arm("A1", "Drug X 10 mg", t),
                arm("A2", "Drug X 20 mg", t),
                arm("A3", "Drug X 40 mg", t),
                arm("P", "Placebo", ArmKind::Comparator),
            ],
            2,
        )]);
        let pairs = mine_arm_pairs(&three, &bins()).unwrap();
        assert_eq!(pairs.len(), 12);
        assert!(pairs.iter().all(NaturalPair::is_well_formed));
    }

    #[test]
    fn unreported_results_are_dropped() {
        let t = ArmKind::Treatment;
        let mut rec = trial("T1", vec![arm("A", "X", t)], 3);
        rec.results[2].result.value = None;
        let c = Corpus::from_records([rec]);
        // only OM0 and OM1 remain resolvable
        assert_eq!(mine_outcome_pairs(&c, &bins()).unwrap().len(), 2);
    }

    #[test]
    fn output_order_is_stable() {
        let t = ArmKind::Treatment;
        let c = Corpus::from_records([
            trial("T2", vec![arm("A", "X", t)], 2),
            trial("T1", vec![arm("B", "Y", t), arm("A", "Y", t)], 2),
        ]);
        let pairs = mine_outcome_pairs(&c, &bins()).unwrap();
        let units: Vec<String> = pairs
            .iter()
            .map(|p| format!("{}>{}", p.source.unit(), p.target.unit()))
            .collect();
        assert_eq!(
            units,
            vec![
                "T1/OM0/A>T1/OM1/A",
                "T1/OM1/A>T1/OM0/A",
                "T1/OM0/B>T1/OM1/B",
                "T1/OM1/B>T1/OM0/B",
                "T2/OM0/A>T2/OM1/A",
                "T2/OM1/A>T2/OM0/A",
            ]
        );
    }

    #[test]
    fn pairs_file_round_trip_with_trace() {
        let t = ArmKind::Treatment;
        let c = Corpus::from_records([trial("T1", vec![arm("A", "X", t)], 2)]);
        let mut pairs = mine_outcome_pairs(&c, &bins()).unwrap();
        let n = attach_traces(
            &mut pairs,
            &[TraceRecord {
                source: UnitRef::new("T1", "OM0", "A"),
                target: UnitRef::new("T1", "OM1", "A"),
                text: "weight loss tracks glycaemic control".into(),
                step_index: 0,
            }],
        );
        assert_eq!(n, 1);
        let mut buf = Vec::new();
        write_pairs(&mut buf, &pairs, &bins()).unwrap();
        let back = read_pairs(buf.as_slice()).unwrap();
        assert_eq!(back, pairs);
        assert!(back[0].trace.is_some());
    }
}
