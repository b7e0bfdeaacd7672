//! Successive counterfactual imagination over a K-state result alphabet.
//!
//! A [`CounterfactualPath`] walks from a source configuration to a target by
//! changing one variable per step. A [`TransitionPolicy`] gives the
//! distribution of the next result state given the previous state and the
//! one-variable perturbation; the chain it induces supports ancestral
//! sampling, exact marginalization (sum-product) and the dominant path
//! (max-product).

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::trial_model::{
    config_diff, OutcomeKind, ResultState, TrialConfig, VariableRegistry, ARM, ENROLLMENT,
    OUTCOME_MEASURE,
};

const FEATURE_VERSION: &str = "transition-features-v1";
/// dose bucket, enrollment bucket, phase delta, geography expansion, outcome kind delta
const SIGNED_DIM: usize = 5;
const PHASE: &str = "phase";
const GEOGRAPHY: &str = "geography";

#[derive(Debug, thiserror::Error)]
pub enum ImagineError {
    #[error("non-local transition: configs differ in {0:?}")]
    NonLocalTransition(Vec<String>),
    #[error("variable `{0}` is not part of the feature spec")]
    UnknownVariable(String),
    #[error("state {state} outside alphabet of size {k}")]
    StateOutOfRange { state: usize, k: usize },
    #[error("parameter matrix has shape {got:?}, expected {expected:?}")]
    Shape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("non-finite policy parameters")]
    NonFinite,
    #[error("result alphabet needs K >= 2, got {0}")]
    InvalidK(usize),
    #[error("enumeration of {0} trajectories exceeds the cap")]
    EnumerationTooLarge(u128),
    #[error("invalid path: {0}")]
    InvalidPath(String),
}

/// Layout of the transition feature vector:
/// one-hot previous state, one-hot perturbed variable (registered variables,
/// outcome measure, arm, no-op), signed perturbation magnitudes, bias.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    k: usize,
    variables: Vec<String>,
}

impl FeatureSpec {
    pub fn new(k: usize, registry: &VariableRegistry) -> Result<Self, ImagineError> {
        Self::from_parts(k, registry.names().map(String::from).collect())
    }

    pub fn from_parts(k: usize, mut variables: Vec<String>) -> Result<Self, ImagineError> {
        if k < 2 {
            return Err(ImagineError::InvalidK(k));
        }
        variables.sort();
        variables.dedup();
        if let Some(bad) = variables.iter().find(|v| *v == ARM || *v == OUTCOME_MEASURE) {
            return Err(ImagineError::UnknownVariable(bad.clone()));
        }
        Ok(Self { k, variables })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    fn perturbation_slots(&self) -> usize {
        self.variables.len() + 3
    }

    pub fn dim(&self) -> usize {
        self.k + self.perturbation_slots() + SIGNED_DIM + 1
    }

    /// Hex SHA-256 over the layout; checkpoints carry it.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(FEATURE_VERSION.as_bytes());
        h.update(format!(";k={};vars=", self.k).as_bytes());
        h.update(self.variables.join(",").as_bytes());
        hex::encode(h.finalize())
    }

    fn slot(&self, name: &str) -> Result<usize, ImagineError> {
        match name {
            OUTCOME_MEASURE => Ok(self.variables.len()),
            ARM => Ok(self.variables.len() + 1),
            _ => self
                .variables
                .binary_search_by(|v| v.as_str().cmp(name))
                .map_err(|_| ImagineError::UnknownVariable(name.to_string())),
        }
    }

    fn noop_slot(&self) -> usize {
        self.variables.len() + 2
    }

    pub fn check_state(&self, s: ResultState) -> Result<(), ImagineError> {
        if s.0 < self.k {
            Ok(())
        } else {
            Err(ImagineError::StateOutOfRange { state: s.0, k: self.k })
        }
    }

    /// Feature vector for the transition `x_prev -> x_next` from state `prev`.
    pub fn features(
        &self,
        prev: ResultState,
        x_prev: &TrialConfig,
        x_next: &TrialConfig,
    ) -> Result<Vec<f64>, ImagineError> {
        self.check_state(prev)?;
        let diff = config_diff(x_prev, x_next);
        if diff.len() > 1 {
            return Err(ImagineError::NonLocalTransition(diff.into_iter().collect()));
        }
        let mut phi = vec![0.0; self.dim()];
        phi[prev.0] = 1.0;
        let base = self.k;
        let changed = diff.iter().next();
        let slot = match changed {
            Some(name) => self.slot(name)?,
            None => self.noop_slot(),
        };
        phi[base + slot] = 1.0;
        let signed = base + self.perturbation_slots();
        if let Some(name) = changed {
            let v = perturbation_magnitudes(name, x_prev, x_next);
            phi[signed..signed + SIGNED_DIM].copy_from_slice(&v);
        }
        phi[self.dim() - 1] = 1.0;
        Ok(phi)
    }
}

fn log2_bucket(prev: Option<f64>, next: Option<f64>) -> f64 {
    match (prev, next) {
        (Some(a), Some(b)) if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() => {
            (b / a).log2().round().clamp(-3.0, 3.0) / 3.0
        }
        _ => 0.0,
    }
}

/// Trial phase as a number; "Phase 1/2" reads as 1.5, roman numerals accepted.
pub fn parse_phase(text: &str) -> Option<f64> {
    let nums: Vec<f64> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter_map(|tok| match tok.to_lowercase().as_str() {
            "i" => Some(1.0),
            "ii" => Some(2.0),
            "iii" => Some(3.0),
            "iv" => Some(4.0),
            t => t.parse::<f64>().ok(),
        })
        .collect();
    (!nums.is_empty()).then(|| nums.iter().sum::<f64>() / nums.len() as f64)
}

pub fn country_count(text: &str) -> usize {
    text.replace(" and ", ",")
        .split([',', ';', '/', '|'])
        .filter(|s| !s.trim().is_empty())
        .count()
}

fn perturbation_magnitudes(name: &str, a: &TrialConfig, b: &TrialConfig) -> [f64; SIGNED_DIM] {
    let mut out = [0.0; SIGNED_DIM];
    let numeric = |c: &TrialConfig, n: &str| {
        c.variables
            .get(n)
            .and_then(|v| v.numeric_value.as_ref())
            .map(|q| q.value)
    };
    let text = |c: &TrialConfig, n: &str| c.variables.get(n).map(|v| v.value.clone()).unwrap_or_default();
    match name {
        ARM => out[0] = log2_bucket(a.arm.dose_mg_per_day, b.arm.dose_mg_per_day),
        ENROLLMENT => out[1] = log2_bucket(numeric(a, ENROLLMENT), numeric(b, ENROLLMENT)),
        PHASE => {
            if let (Some(p), Some(q)) = (parse_phase(&text(a, PHASE)), parse_phase(&text(b, PHASE))) {
                out[2] = ((q - p) / 3.0).clamp(-1.0, 1.0);
            }
        }
        GEOGRAPHY => {
            let (p, q) = (country_count(&text(a, GEOGRAPHY)), country_count(&text(b, GEOGRAPHY)));
            out[3] = match q.cmp(&p) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Less => -1.0,
                std::cmp::Ordering::Equal => 0.0,
            };
        }
        OUTCOME_MEASURE => {
            let kind = |c: &TrialConfig| match c.outcome_measure.kind {
                OutcomeKind::Primary => 1.0,
                OutcomeKind::Secondary => 0.0,
            };
            out[4] = kind(b) - kind(a);
        }
        _ => {}
    }
    out
}

/// Softmax-linear conditional distribution over K result states.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionPolicy {
    spec: FeatureSpec,
    theta: Array2<f64>,
}

impl TransitionPolicy {
    pub fn zeros(spec: FeatureSpec) -> Self {
        let theta = Array2::zeros((spec.k(), spec.dim()));
        Self { spec, theta }
    }

    pub fn new(spec: FeatureSpec, theta: Array2<f64>) -> Result<Self, ImagineError> {
        let expected = (spec.k(), spec.dim());
        if theta.dim() != expected {
            return Err(ImagineError::Shape {
                got: theta.dim(),
                expected,
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(ImagineError::NonFinite);
        }
        Ok(Self { spec, theta })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Array2<f64>) -> Result<(), ImagineError> {
        *self = Self::new(self.spec.clone(), theta)?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    pub fn logits(&self, phi: &[f64]) -> Vec<f64> {
        self.theta.dot(&ArrayView1::from(phi)).to_vec()
    }

    /// Log-softmax of the logits.
    pub fn log_probs(&self, phi: &[f64]) -> Vec<f64> {
        let z = self.logits(phi);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    }

    pub fn probs(&self, phi: &[f64]) -> Vec<f64> {
        let z = self.logits(phi);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn step_distribution(
        &self,
        prev: ResultState,
        x_prev: &TrialConfig,
        x_next: &TrialConfig,
    ) -> Result<Vec<f64>, ImagineError> {
        Ok(self.probs(&self.spec.features(prev, x_prev, x_next)?))
    }

    pub fn step_log_distribution(
        &self,
        prev: ResultState,
        x_prev: &TrialConfig,
        x_next: &TrialConfig,
    ) -> Result<Vec<f64>, ImagineError> {
        Ok(self.log_probs(&self.spec.features(prev, x_prev, x_next)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPath {
    pub configs: Vec<TrialConfig>,
    pub perturbed_variables: Vec<String>,
}

impl CounterfactualPath {
    /// Number of perturbation steps T.
    pub fn len(&self) -> usize {
        self.perturbed_variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perturbed_variables.is_empty()
    }

    pub fn source(&self) -> &TrialConfig {
        &self.configs[0]
    }

    pub fn target(&self) -> &TrialConfig {
        &self.configs[self.configs.len() - 1]
    }

    /// Replays the one-change-per-step invariant.
    pub fn validate(&self) -> Result<(), ImagineError> {
        if self.configs.len() != self.perturbed_variables.len() + 1 {
            return Err(ImagineError::InvalidPath(format!(
                "{} configs for {} steps",
                self.configs.len(),
                self.perturbed_variables.len()
            )));
        }
        for (t, w) in self.configs.windows(2).enumerate() {
            let diff = config_diff(&w[0], &w[1]);
            let expected: BTreeSet<String> = [self.perturbed_variables[t].clone()].into();
            if diff != expected {
                return Err(ImagineError::InvalidPath(format!(
                    "step {} changes {:?}, expected {:?}",
                    t + 1,
                    diff,
                    self.perturbed_variables[t]
                )));
            }
        }
        Ok(())
    }
}

/// Arm, outcome measure, then trial-level variables alphabetically.
pub fn default_ordering(spec: &FeatureSpec) -> Vec<String> {
    let mut out = vec![ARM.to_string(), OUTCOME_MEASURE.to_string()];
    out.extend(spec.variables().iter().cloned());
    out
}

/// Path from `source` to `target` substituting one differing variable per
/// step, in `ordering` priority. Differing variables missing from
/// `ordering` are appended in name order.
pub fn build_path(source: &TrialConfig, target: &TrialConfig, ordering: &[String]) -> CounterfactualPath {
    let diff = config_diff(source, target);
    let mut steps: Vec<String> = ordering.iter().filter(|v| diff.contains(*v)).cloned().collect();
    let mut seen: BTreeSet<String> = steps.iter().cloned().collect();
    for v in &diff {
        if seen.insert(v.clone()) {
            steps.push(v.clone());
        }
    }
    let mut configs = vec![source.clone()];
    for (i, var) in steps.iter().enumerate() {
        let next = if i + 1 == steps.len() {
            target.clone()
        } else {
            configs[i].with_variable_from(var, target)
        };
        configs.push(next);
    }
    CounterfactualPath {
        configs,
        perturbed_variables: steps,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub perturbed_variables: Vec<String>,
    /// R(0)..R(T); the first entry is the observed source state.
    pub states: Vec<ResultState>,
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
}

impl Trajectory {
    pub fn terminal(&self) -> ResultState {
        self.states[self.states.len() - 1]
    }

    fn new(path: &CounterfactualPath, states: Vec<ResultState>, step_log_probs: Vec<f64>) -> Self {
        let log_prob = step_log_probs.iter().sum();
        Self {
            perturbed_variables: path.perturbed_variables.clone(),
            states,
            step_log_probs,
            log_prob,
        }
    }
}

/// Feature vectors for every step and every possible previous state: `[t][prev]`.
pub fn path_contexts(spec: &FeatureSpec, path: &CounterfactualPath) -> Result<Vec<Vec<Vec<f64>>>, ImagineError> {
    path.configs
        .windows(2)
        .map(|w| {
            (0..spec.k())
                .map(|s| spec.features(ResultState(s), &w[0], &w[1]))
                .collect()
        })
        .collect()
}

/// Per-step transition log-probabilities `[t][prev][next]`.
pub fn transition_log_tables(
    policy: &TransitionPolicy,
    path: &CounterfactualPath,
) -> Result<Vec<Vec<Vec<f64>>>, ImagineError> {
    Ok(path_contexts(policy.spec(), path)?
        .iter()
        .map(|step| step.iter().map(|phi| policy.log_probs(phi)).collect())
        .collect())
}

fn categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn sample_trajectory_with<R: Rng>(
    policy: &TransitionPolicy,
    path: &CounterfactualPath,
    r0: ResultState,
    rng: &mut R,
) -> Result<Trajectory, ImagineError> {
    policy.spec().check_state(r0)?;
    let mut states = vec![r0];
    let mut logs = Vec::with_capacity(path.len());
    for w in path.configs.windows(2) {
        let prev = states[states.len() - 1];
        let phi = policy.spec().features(prev, &w[0], &w[1])?;
        let lp = policy.log_probs(&phi);
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let next = categorical(&p, rng);
        logs.push(lp[next]);
        states.push(ResultState(next));
    }
    Ok(Trajectory::new(path, states, logs))
}

/// Ancestral sample, reproducible from `seed`.
pub fn sample_trajectory(
    policy: &TransitionPolicy,
    path: &CounterfactualPath,
    r0: ResultState,
    seed: u64,
) -> Result<Trajectory, ImagineError> {
    sample_trajectory_with(policy, path, r0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Terminal distribution by forward sum-product over the chain.
pub fn exact_marginal(
    policy: &TransitionPolicy,
    path: &CounterfactualPath,
    r0: ResultState,
) -> Result<Vec<f64>, ImagineError> {
    let k = policy.spec().k();
    policy.spec().check_state(r0)?;
    let mut alpha = vec![0.0; k];
    alpha[r0.0] = 1.0;
    for step in transition_log_tables(policy, path)? {
        let mut next = vec![0.0; k];
        for (prev, row) in step.iter().enumerate() {
            if alpha[prev] == 0.0 {
                continue;
            }
            for (s, lp) in row.iter().enumerate() {
                next[s] += alpha[prev] * lp.exp();
            }
        }
        alpha = next;
    }
    Ok(alpha)
}

/// Maximum-probability trajectory by max-product dynamic programming.
/// Ties go to the lower state index, both at the terminal and at every
/// backtrack step.
pub fn dominant_path(
    policy: &TransitionPolicy,
    path: &CounterfactualPath,
    r0: ResultState,
) -> Result<Trajectory, ImagineError> {
    let k = policy.spec().k();
    policy.spec().check_state(r0)?;
    let tables = transition_log_tables(policy, path)?;
    let t_len = tables.len();
    if t_len == 0 {
        return Ok(Trajectory::new(path, vec![r0], Vec::new()));
    }
    // best[s]: best log-probability of reaching s at the current step
    let mut best: Vec<f64> = tables[0][r0.0].clone();
    let mut back: Vec<Vec<usize>> = vec![vec![r0.0; k]];
    for table in &tables[1..] {
        let mut next = vec![f64::NEG_INFINITY; k];
        let mut ptr = vec![0usize; k];
        for s in 0..k {
            for (prev, b) in best.iter().enumerate() {
                let v = b + table[prev][s];
                if v > next[s] {
                    next[s] = v;
                    ptr[s] = prev;
                }
            }
        }
        best = next;
        back.push(ptr);
    }
    let mut terminal = 0;
    for s in 1..k {
        if best[s] > best[terminal] {
            terminal = s;
        }
    }
    let mut states = vec![0usize; t_len + 1];
    states[t_len] = terminal;
    for t in (1..=t_len).rev() {
        states[t - 1] = back[t - 1][states[t]];
    }
    debug_assert_eq!(states[0], r0.0);
    let step_log_probs: Vec<f64> = (0..t_len).map(|t| tables[t][states[t]][states[t + 1]]).collect();
    Ok(Trajectory::new(
        path,
        states.into_iter().map(ResultState).collect(),
        step_log_probs,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    #[default]
    Map,
    Marginal,
}

impl std::str::FromStr for PredictMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "map" => Ok(PredictMode::Map),
            "marginal" => Ok(PredictMode::Marginal),
            other => Err(format!("unknown mode `{other}` (expected map|marginal)")),
        }
    }
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict_terminal(
    policy: &TransitionPolicy,
    path: &CounterfactualPath,
    r0: ResultState,
    mode: PredictMode,
) -> Result<ResultState, ImagineError> {
    match mode {
        PredictMode::Map => Ok(dominant_path(policy, path, r0)?.terminal()),
        PredictMode::Marginal => Ok(ResultState(argmax_lowest(&exact_marginal(policy, path, r0)?))),
    }
}

/// How much of the MAP terminal's marginal mass the dominant path carries.
/// Near 1 when the chain is sharply peaked.
pub fn dominance_ratio(
    policy: &TransitionPolicy,
    path: &CounterfactualPath,
    r0: ResultState,
) -> Result<f64, ImagineError> {
    let map = dominant_path(policy, path, r0)?;
    let marginal = exact_marginal(policy, path, r0)?;
    Ok(map.log_prob.exp() / marginal[map.terminal().0])
}

/// Explicit enumeration over all K^T trajectories. Exponential; used as a
/// reference for the chain algorithms on small instances.
pub mod enumeration {
    use super::*;

    pub const ENUMERATION_CAP: u128 = 1_000_000;

    /// Visits every state sequence R(1)..R(T) in lexicographic order.
    fn for_each_sequence<F: FnMut(&[usize])>(k: usize, t: usize, mut f: F) {
        let mut seq = vec![0usize; t];
        loop {
            f(&seq);
            let mut i = t;
            loop {
                if i == 0 {
                    return;
                }
                i -= 1;
                seq[i] += 1;
                if seq[i] < k {
                    break;
                }
                seq[i] = 0;
            }
        }
    }

    fn check_size(k: usize, t: usize) -> Result<(), ImagineError> {
        let n = (k as u128).checked_pow(t as u32).unwrap_or(u128::MAX);
        if n > ENUMERATION_CAP {
            return Err(ImagineError::EnumerationTooLarge(n));
        }
        Ok(())
    }

    /// Terminal distribution by summing the probability of every trajectory.
    pub fn marginal(
        policy: &TransitionPolicy,
        path: &CounterfactualPath,
        r0: ResultState,
    ) -> Result<Vec<f64>, ImagineError> {
        let k = policy.spec().k();
        let t = path.len();
        check_size(k, t)?;
        let mut out = vec![0.0; k];
        if t == 0 {
            out[r0.0] = 1.0;
            return Ok(out);
        }
        let mut err = None;
        for_each_sequence(k, t, |seq| {
            let mut prob = 1.0;
            let mut prev = r0;
            for (step, w) in path.configs.windows(2).enumerate() {
                match policy.step_distribution(prev, &w[0], &w[1]) {
                    Ok(d) => prob *= d[seq[step]],
                    Err(e) => {
                        err.get_or_insert(e);
                        return;
                    }
                }
                prev = ResultState(seq[step]);
            }
            out[seq[t - 1]] += prob;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// The maximum-probability trajectory. Among exact ties, prefers the
    /// lower terminal state, then the lower state at each earlier step.
    pub fn map_trajectory(
        policy: &TransitionPolicy,
        path: &CounterfactualPath,
        r0: ResultState,
    ) -> Result<(Vec<ResultState>, f64), ImagineError> {
        let k = policy.spec().k();
        let t = path.len();
        check_size(k, t)?;
        if t == 0 {
            return Ok((vec![r0], 0.0));
        }
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut err = None;
        for_each_sequence(k, t, |seq| {
            let mut lp = 0.0;
            let mut prev = r0;
            for (step, w) in path.configs.windows(2).enumerate() {
                match policy.step_log_distribution(prev, &w[0], &w[1]) {
                    Ok(d) => lp += d[seq[step]],
                    Err(e) => {
                        err.get_or_insert(e);
                        return;
                    }
                }
                prev = ResultState(seq[step]);
            }
            let better = match &best {
                None => true,
                Some((b, blp)) => lp > *blp || (lp == *blp && seq.iter().rev().lt(b.iter().rev())),
            };
            if better {
                best = Some((seq.to_vec(), lp));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let (seq, lp) = best.expect("at least one sequence");
        let mut states = vec![r0];
        states.extend(seq.into_iter().map(ResultState));
        Ok((states, lp))
    }
}
