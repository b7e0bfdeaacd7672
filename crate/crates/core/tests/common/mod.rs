#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialcf_core::imagination::{
    build_path, default_ordering, exact_marginal, CounterfactualPath, FeatureSpec, TransitionPolicy,
};
use trialcf_core::learn::GrpoPrompt;
use trialcf_core::trial_model::{
    ArmKind, Direction, OutcomeKind, OutcomeMeasure, Quantity, ResultState, StudyArm, TrialConfig,
    TrialVariable,
};

pub const VARS: [&str; 5] = ["condition", "enrollment", "geography", "phase", "sponsor"];
/// Perturbable names in the order `target_with_diff` applies them.
pub const DIFF_ORDER: [&str; 7] = [
    "arm",
    "outcome_measure",
    "condition",
    "geography",
    "phase",
    "sponsor",
    "enrollment",
];

pub fn spec(k: usize) -> FeatureSpec {
    FeatureSpec::from_parts(k, VARS.iter().map(|s| s.to_string()).collect()).unwrap()
}

pub fn config(tag: usize) -> TrialConfig {
    let mut variables = BTreeMap::new();
    let mut put = |name: &str, value: String, numeric: Option<f64>| {
        variables.insert(
            name.to_string(),
            TrialVariable {
                name: name.to_string(),
                value,
                numeric_value: numeric.map(|v| Quantity {
                    value: v,
                    unit: "participants".into(),
                }),
            },
        );
    };
    put("condition", format!("condition {tag}"), None);
    put(
        "geography",
        ["US", "US, Japan", "US, Japan, Brazil"][tag % 3].to_string(),
        None,
    );
    put("phase", format!("Phase {}", 1 + tag % 3), None);
    put("sponsor", format!("sponsor {tag}"), None);
    put("enrollment", format!("{}", 50 * (tag + 1)), Some(50.0 * (tag + 1) as f64));
    TrialConfig {
        trial_id: format!("T{tag}"),
        variables,
        outcome_measure: OutcomeMeasure {
            id: format!("OM{tag}"),
            title: format!("measure {tag}"),
            timeframe: String::new(),
            kind: if tag.is_multiple_of(2) {
                OutcomeKind::Primary
            } else {
                OutcomeKind::Secondary
            },
            direction: Direction::HigherIsBetter,
        },
        arm: StudyArm {
            id: format!("A{tag}"),
            label: format!("drug {tag}"),
            drug_names: vec!["drug".into()],
            dose_text: String::new(),
            dose_mg_per_day: Some(10.0 * (tag + 1) as f64),
            arm_kind: ArmKind::Treatment,
        },
    }
}

/// `config(from)` with the named variables taken from `config(to)`.
pub fn perturbed(from: usize, to: usize, names: &[&str]) -> TrialConfig {
    let other = config(to);
    names
        .iter()
        .fold(config(from), |c, v| c.with_variable_from(v, &other))
}

pub fn random_theta(spec: &FeatureSpec, rng: &mut ChaCha8Rng, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((spec.k(), spec.dim()), |_| rng.random_range(-scale..scale))
}

pub fn random_policy(spec: &FeatureSpec, rng: &mut ChaCha8Rng, scale: f64) -> TransitionPolicy {
    TransitionPolicy::new(spec.clone(), random_theta(spec, rng, scale)).unwrap()
}

/// Random path of `t` steps between two synthetic configs.
pub fn random_path(spec: &FeatureSpec, rng: &mut ChaCha8Rng, t: usize) -> CounterfactualPath {
    let mut names: Vec<&str> = DIFF_ORDER.to_vec();
    for i in (1..names.len()).rev() {
        let j = rng.random_range(0..=i);
        names.swap(i, j);
    }
    let from = rng.random_range(0..6);
    let to = from + 1 + rng.random_range(0..2);
    let target = perturbed(from, to, &names[..t]);
    let path = build_path(&config(from), &target, &default_ordering(spec));
    assert_eq!(path.len(), t);
    path
}

/// Prompts whose gold label is the terminal a random teacher policy reaches
/// with probability at least 0.99; other (path, source) combinations are
/// discarded. The label of state `s` is its index.
pub struct HiddenLaw {
    pub teacher: TransitionPolicy,
    pub prompts: Vec<GrpoPrompt>,
}

pub fn hidden_law(k: usize, t: usize, n_prompts: usize, seed: u64) -> HiddenLaw {
    let s = spec(k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = random_policy(&s, &mut rng, 12.0);
    let mut prompts = Vec::new();
    let mut p = 0;
    while prompts.len() < n_prompts {
        let path = random_path(&s, &mut rng, t);
        p += 1;
        for r0 in 0..k {
            let m = exact_marginal(&teacher, &path, ResultState(r0)).unwrap();
            let gold = (0..k).fold(0, |b, i| if m[i] > m[b] { i } else { b });
            if m[gold] < 0.99 || prompts.len() == n_prompts {
                continue;
            }
            prompts.push(GrpoPrompt {
                question_id: format!("p{p}r{r0}"),
                source_result: ResultState(r0),
                path: path.clone(),
                gold_label: gold.to_string(),
                verifier_id: "identity".into(),
                comparator_state: None,
            });
        }
    }
    HiddenLaw { teacher, prompts }
}

pub fn identity_reward(p: &GrpoPrompt, s: ResultState) -> f64 {
    if s.0.to_string() == p.gold_label {
        1.0
    } else {
        0.0
    }
}

/// Exact expected reward of `policy` averaged over prompts.
pub fn expected_reward(policy: &TransitionPolicy, prompts: &[GrpoPrompt]) -> f64 {
    prompts
        .iter()
        .map(|q| {
            let m = exact_marginal(policy, &q.path, q.source_result).unwrap();
            m[q.gold_label.parse::<usize>().unwrap()]
        })
        .sum::<f64>()
        / prompts.len() as f64
}
