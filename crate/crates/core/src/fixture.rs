//! Deterministic synthetic corpus and benchmark questions.
//!
//! Results follow a latent dose-response law per drug plus noise, so the
//! discretized states carry learnable structure.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::reward_eval::{
    BenchmarkQuestion, QuestionClass, Split, A_BETTER, B_BETTER, NO, NO_DIFFERENCE, YES,
};
use crate::trial_model::{
    ArmKind, Corpus, Direction, Discretization, OutcomeKind, OutcomeMeasure, Quantity, ResultEntry,
    ResultRecord, StudyArm, TrialRecord, TrialVariable, UnitRef,
};

pub const FIXTURE_VARIABLES: [&str; 5] = ["condition", "enrollment", "geography", "phase", "sponsor"];

struct Endpoint {
    title: &'static str,
    unit: &'static str,
    direction: Direction,
}

struct Condition {
    name: &'static str,
    endpoints: &'static [Endpoint],
    drugs: &'static [(&'static str, f64)],
}

const fn ep(title: &'static str, unit: &'static str, direction: Direction) -> Endpoint {
    Endpoint { title, unit, direction }
}

const CONDITIONS: &[Condition] = &[
    Condition {
        name: "type 2 diabetes",
        endpoints: &[
            ep("Change in HbA1c", "%", Direction::LowerIsBetter),
            ep("Change in fasting plasma glucose", "points", Direction::LowerIsBetter),
            ep("Change in body weight", "points", Direction::LowerIsBetter),
        ],
        drugs: &[("metformin", 500.0), ("sitagliptin", 50.0), ("empagliflozin", 10.0)],
    },
    Condition {
        name: "essential hypertension",
        endpoints: &[
            ep("Change in systolic blood pressure", "mmHg", Direction::LowerIsBetter),
            ep("Change in diastolic blood pressure", "mmHg", Direction::LowerIsBetter),
        ],
        drugs: &[("amlodipine", 2.5), ("losartan", 25.0)],
    },
    Condition {
        name: "major depressive disorder",
        endpoints: &[
            ep("Change in MADRS total score", "points", Direction::LowerIsBetter),
            ep("Response rate", "%", Direction::HigherIsBetter),
            ep("Change in HAM-D total score", "points", Direction::LowerIsBetter),
        ],
        drugs: &[("sertraline", 50.0), ("vortioxetine", 5.0)],
    },
    Condition {
        name: "rheumatoid arthritis",
        endpoints: &[
            ep("ACR20 response rate", "%", Direction::HigherIsBetter),
            ep("Change in DAS28-CRP", "points", Direction::LowerIsBetter),
        ],
        drugs: &[("tofacitinib", 5.0), ("baricitinib", 2.0)],
    },
    Condition {
        name: "moderate asthma",
        endpoints: &[
            ep("Change in trough FEV1", "%", Direction::HigherIsBetter),
            ep("Annualized exacerbation rate", "points", Direction::LowerIsBetter),
        ],
        drugs: &[("budesonide", 200.0), ("montelukast", 10.0)],
    },
];

const COUNTRIES: &[&str] = &["United States", "Canada", "Germany", "Japan", "Brazil", "India"];
const SPONSORS: &[&str] = &["Northwind Pharma", "Contoso Bio", "Fabrikam Therapeutics"];
const PHASES: &[&str] = &["Phase 2", "Phase 3", "Phase 2/3"];
const TIMEFRAMES: &[&str] = &["12 weeks", "24 weeks", "52 weeks"];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn scale_for(unit: &str) -> f64 {
    match unit {
        "%" => 10.0,
        "mmHg" => 5.0,
        _ => 1.0,
    }
}

fn text_var(name: &str, value: String) -> TrialVariable {
    TrialVariable {
        name: name.into(),
        value,
        numeric_value: None,
    }
}

fn trial(i: usize, rng: &mut ChaCha8Rng, drug_strength: &BTreeMap<&str, f64>) -> TrialRecord {
    let cond = &CONDITIONS[rng.random_range(0..CONDITIONS.len())];
    let n_countries = rng.random_range(1..=3);
    let mut countries: Vec<&str> = COUNTRIES.to_vec();
    for j in (1..countries.len()).rev() {
        countries.swap(j, rng.random_range(0..=j));
    }
    let enrollment = 60 * rng.random_range(2..=10) as u64;
    let variables = vec![
        text_var("condition", cond.name.into()),
        TrialVariable {
            name: "enrollment".into(),
            value: enrollment.to_string(),
            numeric_value: Some(Quantity {
                value: enrollment as f64,
                unit: "participants".into(),
            }),
        },
        text_var("geography", countries[..n_countries].join(", ")),
        text_var("phase", PHASES[rng.random_range(0..PHASES.len())].into()),
        text_var("sponsor", SPONSORS[rng.random_range(0..SPONSORS.len())].into()),
    ];

    let n_om = rng.random_range(1..=cond.endpoints.len());
    let timeframe = TIMEFRAMES[rng.random_range(0..TIMEFRAMES.len())];
    let outcome_measures: Vec<OutcomeMeasure> = cond.endpoints[..n_om]
        .iter()
        .enumerate()
        .map(|(j, e)| OutcomeMeasure {
            id: format!("OM{}", j + 1),
            title: e.title.into(),
            timeframe: timeframe.into(),
            kind: if j == 0 { OutcomeKind::Primary } else { OutcomeKind::Secondary },
            direction: e.direction,
        })
        .collect();

    let (drug, base_dose) = cond.drugs[rng.random_range(0..cond.drugs.len())];
    let n_dose = rng.random_range(1..=3);
    let mut arms = Vec::new();
    // (arm, latent efficacy in score units)
    let mut efficacy = Vec::new();
    for d in 0..n_dose {
        let dose = base_dose * f64::from(1u32 << d);
        arms.push(StudyArm {
            id: format!("A{}", arms.len() + 1),
            label: format!("{drug} {dose} mg"),
            drug_names: vec![format!("{drug} {dose} mg")],
            dose_text: format!("{dose} mg daily"),
            dose_mg_per_day: Some(dose),
            arm_kind: ArmKind::Treatment,
        });
        efficacy.push(drug_strength[drug] * (1.0 + 0.6 * d as f64));
    }
    if rng.random_bool(0.6) {
        arms.push(StudyArm {
            id: format!("A{}", arms.len() + 1),
            label: "Placebo".into(),
            drug_names: Vec::new(),
            dose_text: String::new(),
            dose_mg_per_day: None,
            arm_kind: ArmKind::Comparator,
        });
        efficacy.push(0.0);
    }

    let n_analyzed = enrollment / arms.len() as u64;
    let mut results = Vec::new();
    for (j, om) in outcome_measures.iter().enumerate() {
        let weight = if j == 0 { 1.0 } else { 0.6 };
        let endpoint = &cond.endpoints[j];
        for (arm, eff) in arms.iter().zip(&efficacy) {
            let score = weight * eff + 0.35 * normal(rng);
            let sign = match om.direction {
                Direction::HigherIsBetter => 1.0,
                Direction::LowerIsBetter => -1.0,
            };
            let missing = rng.random_bool(0.03);
            let value = (sign * score * scale_for(endpoint.unit) * 100.0).round() / 100.0;
            results.push(ResultEntry {
                outcome_measure_id: om.id.clone(),
                arm_id: arm.id.clone(),
                result: ResultRecord {
                    value: (!missing).then_some(value),
                    unit: endpoint.unit.into(),
                    n_analyzed,
                    significant: None,
                    raw_text: if missing { "not reported".into() } else { format!("{value}") },
                },
            });
        }
    }
    TrialRecord {
        trial_id: format!("SYN{:04}", i + 1),
        variables,
        outcome_measures,
        arms,
        results,
    }
}

/// `n` synthetic trials, reproducible from `seed`.
pub fn synthetic_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strength = BTreeMap::new();
    for c in CONDITIONS {
        for (d, _) in c.drugs {
            strength.insert(*d, rng.random_range(0.4..1.6));
        }
    }
    Corpus::from_records((0..n).map(|i| trial(i, &mut rng, &strength)).collect::<Vec<_>>())
}

/// Superiority questions on every treatment arm's primary measure, and
/// comparative questions against the placebo arm where one exists. Trials
/// with index `i % 5 < 2` go to the training split.
pub fn synthetic_questions(corpus: &Corpus, bins: &Discretization, superiority_threshold: usize) -> Vec<BenchmarkQuestion> {
    let mut out = Vec::new();
    for (ti, t) in corpus.iter().enumerate() {
        let split = if ti % 5 < 2 { Split::Train } else { Split::Eval };
        let Some(primary) = t.outcome_measures.iter().find(|o| o.kind == OutcomeKind::Primary) else {
            continue;
        };
        let state = |arm: &str| corpus.state(&UnitRef::new(&t.trial_id, &primary.id, arm), bins).ok();
        let placebo = t.arms.iter().find(|a| a.arm_kind == ArmKind::Comparator);
        for arm in t.arms.iter().filter(|a| a.arm_kind == ArmKind::Treatment) {
            let Some(s) = state(&arm.id) else { continue };
            let target = UnitRef::new(&t.trial_id, &primary.id, &arm.id);
            out.push(BenchmarkQuestion {
                id: format!("Q{:04}", out.len() + 1),
                class: QuestionClass::Superiority,
                target_unit: target.clone(),
                choices: QuestionClass::Superiority.default_choices(),
                gold: if s.0 >= superiority_threshold { YES } else { NO }.into(),
                source_unit: None,
                comparator_arm_id: None,
                split,
            });
            if let Some(p) = placebo {
                if let Some(ps) = state(&p.id) {
                    let gold = match s.cmp(&ps) {
                        std::cmp::Ordering::Greater => A_BETTER,
                        std::cmp::Ordering::Less => B_BETTER,
                        std::cmp::Ordering::Equal => NO_DIFFERENCE,
                    };
                    out.push(BenchmarkQuestion {
                        id: format!("Q{:04}", out.len() + 1),
                        class: QuestionClass::ComparativeEffect,
                        target_unit: target,
                        choices: QuestionClass::ComparativeEffect.default_choices(),
                        gold: gold.into(),
                        source_unit: None,
                        comparator_arm_id: Some(p.id.clone()),
                        split,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial_model::{parse_corpus, VariableRegistry};

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let a = synthetic_corpus(50, 7);
        let b = synthetic_corpus(50, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        let mut buf = Vec::new();
        a.write_ndjson(&mut buf, "v1").unwrap();
        let reg = VariableRegistry::new(FIXTURE_VARIABLES).unwrap();
        let back = parse_corpus(buf.as_slice(), "v1", &reg).unwrap();
        assert!(back.rejects.is_empty(), "{:?}", back.rejects);
        assert_eq!(back.corpus, a);
    }

    #[test]
    fn questions_are_consistent() {
        let c = synthetic_corpus(50, 7);
        let bins = Discretization::default();
        let qs = synthetic_questions(&c, &bins, 3);
        assert!(qs.len() > 40);
        for q in &qs {
            q.validate(&c).unwrap();
        }
        assert!(qs.iter().any(|q| q.split == Split::Train));
        assert!(qs.iter().any(|q| q.class == QuestionClass::ComparativeEffect));
        let golds: std::collections::BTreeSet<&str> = qs.iter().map(|q| q.gold.as_str()).collect();
        assert!(golds.len() >= 4, "{golds:?}");
    }
}
