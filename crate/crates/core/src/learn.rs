//! Training the transition policy.
//!
//! Supervised fine-tuning minimizes cross-entropy on natural pairs. GRPO
//! samples groups of trajectories per prompt, scores terminals with a
//! verifiable reward, and descends a clipped-ratio surrogate with a KL pull
//! toward a reference policy. Both use plain gradient descent.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::imagination::{
    path_contexts, sample_trajectory_with, CounterfactualPath, FeatureSpec, ImagineError,
    TransitionPolicy,
};
use crate::pair_miner::NaturalPair;
use crate::trial_model::{config_diff, ResultState};

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("reward evaluation failed: {0}")]
    Reward(String),
    #[error("example is not a single-variable transition (differs in {0:?})")]
    NotSingleStep(Vec<String>),
    #[error(transparent)]
    Imagine(#[from] ImagineError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("feature spec hash mismatch: expected {expected}, found {found}")]
    SpecMismatch { expected: String, found: String },
}

fn io_err(path: &Path, source: std::io::Error) -> LearnError {
    LearnError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Gradient of `log softmax(Θφ)[target]` with respect to Θ, scaled by `w`,
/// accumulated into `grad`.
fn add_log_prob_grad(grad: &mut Array2<f64>, probs: &[f64], target: usize, phi: &[f64], w: f64) {
    let phi = ArrayView1::from(phi);
    for (j, p) in probs.iter().enumerate() {
        let coef = w * (if j == target { 1.0 } else { 0.0 } - p);
        if coef != 0.0 {
            grad.row_mut(j).scaled_add(coef, &phi);
        }
    }
}

// ---------------------------------------------------------------- SFT

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<NaturalPair>,
    pub features: Vec<f64>,
    pub target_state: ResultState,
}

impl SftExample {
    pub fn from_pair(spec: &FeatureSpec, pair: &NaturalPair) -> Result<Self, LearnError> {
        let diff = config_diff(&pair.source, &pair.target);
        if diff.len() != 1 {
            return Err(LearnError::NotSingleStep(diff.into_iter().collect()));
        }
        spec.check_state(pair.target_result)?;
        Ok(Self {
            features: spec.features(pair.source_result, &pair.source, &pair.target)?,
            target_state: pair.target_result,
            pair: Some(pair.clone()),
        })
    }
}

/// Mean cross-entropy of the targets and its gradient.
pub fn sft_loss_and_grad(
    policy: &TransitionPolicy,
    batch: &[&SftExample],
) -> Result<(f64, Array2<f64>), LearnError> {
    if batch.is_empty() {
        return Err(LearnError::Empty("SFT batch"));
    }
    if !policy.is_finite() {
        return Err(LearnError::NonFinite { what: "parameters", step: 0 });
    }
    let mut grad = Array2::zeros(policy.theta().dim());
    let mut loss = 0.0;
    let w = 1.0 / batch.len() as f64;
    for ex in batch {
        let lp = policy.log_probs(&ex.features);
        let t = ex.target_state.0;
        loss -= lp[t];
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        // descent direction of the loss is the negated log-prob gradient
        add_log_prob_grad(&mut grad, &p, t, &ex.features, -w);
    }
    Ok((loss * w, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1.0,
            batch_size: None,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LearnError::InvalidConfig("sft learning_rate must be > 0".into()));
        }
        if self.batch_size == Some(0) {
            return Err(LearnError::InvalidConfig("sft batch_size must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub policy: TransitionPolicy,
    /// Full-data loss after each epoch.
    pub loss_history: Vec<f64>,
}

pub fn sft_train(
    policy: &TransitionPolicy,
    examples: &[SftExample],
    cfg: &SftConfig,
) -> Result<SftOutcome, LearnError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(LearnError::Empty("SFT example set"));
    }
    let mut policy = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let all: Vec<&SftExample> = examples.iter().collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        match cfg.batch_size {
            None => {
                let (_, g) = sft_loss_and_grad(&policy, &all)?;
                descend(&mut policy, &g, cfg.learning_rate, epoch)?;
            }
            Some(bs) => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(bs) {
                    let batch: Vec<&SftExample> = chunk.iter().map(|&i| &examples[i]).collect();
                    let (_, g) = sft_loss_and_grad(&policy, &batch)?;
                    descend(&mut policy, &g, cfg.learning_rate, epoch)?;
                }
            }
        }
        let (loss, _) = sft_loss_and_grad(&policy, &all)?;
        if !loss.is_finite() {
            return Err(LearnError::NonFinite { what: "SFT loss", step: epoch });
        }
        log::debug!("sft epoch {epoch}: loss {loss:.6}");
        history.push(loss);
    }
    Ok(SftOutcome {
        policy,
        loss_history: history,
    })
}

fn descend(policy: &mut TransitionPolicy, grad: &Array2<f64>, lr: f64, step: usize) -> Result<(), LearnError> {
    let next = policy.theta() - &(grad * lr);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(LearnError::NonFinite { what: "parameters", step });
    }
    policy.set_theta(next)?;
    Ok(())
}

// ---------------------------------------------------------------- GRPO

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub adv_eps: f64,
    pub clip: f64,
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            adv_eps: 1e-4,
            clip: 0.2,
            kl_weight: 0.01,
            learning_rate: 0.5,
            iterations: 100,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.adv_eps.is_nan() || self.adv_eps <= 0.0 {
            return bad("adv_eps must be > 0");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight must be >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoPrompt {
    pub question_id: String,
    pub source_result: ResultState,
    pub path: CounterfactualPath,
    pub gold_label: String,
    pub verifier_id: String,
    /// Second arm's state for comparative questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparator_state: Option<ResultState>,
}

/// Deterministic reward of a terminal state for a prompt.
pub trait TerminalReward: Sync {
    fn reward(&self, prompt: &GrpoPrompt, terminal: ResultState) -> Result<f64, LearnError>;
}

impl<F> TerminalReward for F
where
    F: Fn(&GrpoPrompt, ResultState) -> f64 + Sync,
{
    fn reward(&self, prompt: &GrpoPrompt, terminal: ResultState) -> Result<f64, LearnError> {
        Ok(self(prompt, terminal))
    }
}

/// Group-normalized advantages `(r - mean) / (std + eps)` with the
/// population standard deviation. Equal rewards give exact zeros.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let denom = var.sqrt() + eps;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

pub fn clip_ratio(rho: f64, eta: f64) -> f64 {
    rho.clamp(1.0 - eta, 1.0 + eta)
}

pub fn clipped_term(rho: f64, adv: f64, eta: f64) -> f64 {
    (rho * adv).min(clip_ratio(rho, eta) * adv)
}

/// Whether the clipped branch is strictly the smaller one, which zeroes
/// the surrogate's gradient.
fn clip_active(rho: f64, adv: f64, eta: f64) -> bool {
    clip_ratio(rho, eta) * adv < rho * adv
}

/// KL(p ‖ r) between categorical distributions given as log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_r: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_r)
        .map(|(lp, lr)| lp.exp() * (lp - lr))
        .sum::<f64>()
        .max(0.0)
}

/// Summed per-step KL at the given contexts.
pub fn kl_penalty(policy: &TransitionPolicy, reference: &TransitionPolicy, contexts: &[&[f64]]) -> f64 {
    contexts
        .iter()
        .map(|phi| categorical_kl(&policy.log_probs(phi), &reference.log_probs(phi)))
        .sum()
}

/// A trajectory sampled under the old policy, with its visited contexts
/// frozen so the objective is a deterministic function of Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTrajectory {
    pub states: Vec<ResultState>,
    /// Feature vector of each step at the realized previous state.
    pub contexts: Vec<Vec<f64>>,
    pub old_log_prob: f64,
    pub reward: f64,
}

impl FrozenTrajectory {
    pub fn log_prob(&self, policy: &TransitionPolicy) -> f64 {
        self.contexts
            .iter()
            .zip(&self.states[1..])
            .map(|(phi, s)| policy.log_probs(phi)[s.0])
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledGroup {
    pub prompt_index: usize,
    pub trajectories: Vec<FrozenTrajectory>,
    pub advantages: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GrpoBatch {
    pub groups: Vec<SampledGroup>,
}

/// `exp(log p_θ(τ) - log p_old(τ))` along the trajectory's realized states.
pub fn trajectory_ratio(
    policy: &TransitionPolicy,
    sampling_policy: &TransitionPolicy,
    path: &CounterfactualPath,
    states: &[ResultState],
) -> Result<f64, LearnError> {
    let ctx = path_contexts(policy.spec(), path)?;
    let mut diff = 0.0;
    for (t, step) in ctx.iter().enumerate() {
        let phi = &step[states[t].0];
        let s = states[t + 1].0;
        diff += policy.log_probs(phi)[s] - sampling_policy.log_probs(phi)[s];
    }
    Ok(diff.exp())
}

fn prompt_rng(seed: u64, iteration: usize, prompt: usize, n_prompts: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration as u64) * (n_prompts as u64) + prompt as u64);
    rng
}

/// Samples a group per prompt under `old` and scores it. Prompts are
/// processed in parallel; each has its own seed stream, so the result does
/// not depend on scheduling.
pub fn sample_groups(
    old: &TransitionPolicy,
    prompts: &[GrpoPrompt],
    cfg: &GrpoConfig,
    reward: &dyn TerminalReward,
    iteration: usize,
) -> Result<GrpoBatch, LearnError> {
    let groups = prompts
        .par_iter()
        .enumerate()
        .map(|(pi, prompt)| {
            let mut rng = prompt_rng(cfg.seed, iteration, pi, prompts.len());
            let ctx = path_contexts(old.spec(), &prompt.path)?;
            let mut trajectories = Vec::with_capacity(cfg.group_size);
            for _ in 0..cfg.group_size {
                let tr = sample_trajectory_with(old, &prompt.path, prompt.source_result, &mut rng)?;
                let contexts = (0..ctx.len()).map(|t| ctx[t][tr.states[t].0].clone()).collect();
                let r = reward.reward(prompt, tr.terminal())?;
                trajectories.push(FrozenTrajectory {
                    states: tr.states,
                    contexts,
                    old_log_prob: tr.log_prob,
                    reward: r,
                });
            }
            let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
            Ok(SampledGroup {
                prompt_index: pi,
                advantages: group_advantages(&rewards, cfg.adv_eps),
                trajectories,
            })
        })
        .collect::<Result<Vec<_>, LearnError>>()?;
    Ok(GrpoBatch { groups })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepStats {
    pub iteration: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub clip_fraction: f64,
    pub kl: f64,
}

struct GroupTerms {
    loss: f64,
    grad: Array2<f64>,
    clipped: usize,
    kl: f64,
}

fn group_terms(
    policy: &TransitionPolicy,
    reference: &TransitionPolicy,
    group: &SampledGroup,
    cfg: &GrpoConfig,
) -> GroupTerms {
    let g = group.trajectories.len() as f64;
    let mut grad = Array2::zeros(policy.theta().dim());
    let mut surrogate = 0.0;
    let mut kl_total = 0.0;
    let mut clipped = 0;
    for (tr, &adv) in group.trajectories.iter().zip(&group.advantages) {
        let step_lp: Vec<Vec<f64>> = tr.contexts.iter().map(|phi| policy.log_probs(phi)).collect();
        let log_prob: f64 = step_lp.iter().zip(&tr.states[1..]).map(|(lp, s)| lp[s.0]).sum();
        let rho = (log_prob - tr.old_log_prob).exp();
        surrogate += clipped_term(rho, adv, cfg.clip);
        let surrogate_coef = if clip_active(rho, adv, cfg.clip) {
            clipped += 1;
            0.0
        } else {
            adv * rho
        };
        for ((phi, lp), s) in tr.contexts.iter().zip(&step_lp).zip(&tr.states[1..]) {
            let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            if surrogate_coef != 0.0 {
                add_log_prob_grad(&mut grad, &p, s.0, phi, -surrogate_coef / g);
            }
            if cfg.kl_weight > 0.0 {
                let lr = reference.log_probs(phi);
                let kl = categorical_kl(lp, &lr);
                kl_total += kl;
                let dz: Array1<f64> = (0..p.len()).map(|j| p[j] * (lp[j] - lr[j] - kl)).collect();
                let phi = ArrayView1::from(phi.as_slice());
                for (j, c) in dz.iter().enumerate() {
                    grad.row_mut(j).scaled_add(cfg.kl_weight * c / g, &phi);
                }
            }
        }
    }
    let kl_mean = kl_total / g;
    GroupTerms {
        loss: -surrogate / g + cfg.kl_weight * kl_mean,
        grad,
        clipped,
        kl: kl_mean,
    }
}

/// GRPO objective over a frozen batch, averaged over prompts, with its
/// analytic gradient. Returns `(loss, grad, clip fraction, mean KL)`.
pub fn grpo_objective(
    policy: &TransitionPolicy,
    reference: &TransitionPolicy,
    batch: &GrpoBatch,
    cfg: &GrpoConfig,
) -> Result<(f64, Array2<f64>, f64, f64), LearnError> {
    if batch.groups.is_empty() {
        return Err(LearnError::Empty("GRPO batch"));
    }
    if policy.spec() != reference.spec() {
        return Err(LearnError::SpecMismatch {
            expected: policy.spec().hash(),
            found: reference.spec().hash(),
        });
    }
    let terms: Vec<GroupTerms> = batch
        .groups
        .par_iter()
        .map(|g| group_terms(policy, reference, g, cfg))
        .collect();
    let n = terms.len() as f64;
    let mut grad = Array2::zeros(policy.theta().dim());
    let (mut loss, mut kl, mut clipped, mut count) = (0.0, 0.0, 0usize, 0usize);
    for (t, g) in terms.iter().zip(&batch.groups) {
        loss += t.loss;
        kl += t.kl;
        clipped += t.clipped;
        count += g.trajectories.len();
        grad.scaled_add(1.0 / n, &t.grad);
    }
    Ok((loss / n, grad, clipped as f64 / count.max(1) as f64, kl / n))
}

/// One sample-score-update iteration with `policy` as the sampling snapshot.
pub fn grpo_step(
    policy: &TransitionPolicy,
    reference: &TransitionPolicy,
    prompts: &[GrpoPrompt],
    cfg: &GrpoConfig,
    reward: &dyn TerminalReward,
    iteration: usize,
) -> Result<(TransitionPolicy, GrpoStepStats), LearnError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(LearnError::Empty("prompt batch"));
    }
    let batch = sample_groups(policy, prompts, cfg, reward, iteration)?;
    let (loss, grad, clip_fraction, kl) = grpo_objective(policy, reference, &batch, cfg)?;
    if !loss.is_finite() {
        return Err(LearnError::NonFinite { what: "GRPO loss", step: iteration });
    }
    let mut next = policy.clone();
    descend(&mut next, &grad, cfg.learning_rate, iteration)?;
    let n: usize = batch.groups.iter().map(|g| g.trajectories.len()).sum();
    let mean_reward =
        batch.groups.iter().flat_map(|g| g.trajectories.iter().map(|t| t.reward)).sum::<f64>() / n as f64;
    let mean_abs_advantage =
        batch.groups.iter().flat_map(|g| g.advantages.iter().map(|a| a.abs())).sum::<f64>() / n as f64;
    Ok((
        next,
        GrpoStepStats {
            iteration,
            loss,
            mean_reward,
            mean_abs_advantage,
            clip_fraction,
            kl,
        },
    ))
}

pub fn grpo_train(
    policy: &TransitionPolicy,
    reference: &TransitionPolicy,
    prompts: &[GrpoPrompt],
    cfg: &GrpoConfig,
    reward: &dyn TerminalReward,
) -> Result<(TransitionPolicy, Vec<GrpoStepStats>), LearnError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(LearnError::Empty("prompt set"));
    }
    let mut current = policy.clone();
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (next, stats) = grpo_step(&current, reference, prompts, cfg, reward, it)?;
        log::debug!("grpo iteration {it}: reward {:.4} kl {:.5}", stats.mean_reward, stats.kl);
        current = next;
        curve.push(stats);
    }
    Ok((current, curve))
}

// ---------------------------------------------------------------- checkpoints

const MAGIC: &[u8; 8] = b"TCFCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: u64,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub feature_spec: FeatureSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub policy: TransitionPolicy,
    pub reference: TransitionPolicy,
    pub meta: CheckpointMeta,
}

/// Binary layout, little-endian: magic, version, K, d, 32-byte feature-spec
/// hash, meta JSON (u32 length + bytes), Θ, Θ_ref, SHA-256 of all prior bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, LearnError> {
    let spec = ckpt.policy.spec();
    if ckpt.reference.spec() != spec || &ckpt.meta.feature_spec != spec {
        return Err(LearnError::SpecMismatch {
            expected: spec.hash(),
            found: ckpt.reference.spec().hash(),
        });
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| LearnError::InvalidConfig(e.to_string()))?;
    let w = |buf: &mut Vec<u8>, v: u32| buf.write_u32::<LittleEndian>(v).expect("vec write");
    w(&mut buf, VERSION);
    w(&mut buf, spec.k() as u32);
    w(&mut buf, spec.dim() as u32);
    buf.extend_from_slice(&hex::decode(spec.hash()).expect("hex hash"));
    w(&mut buf, meta.len() as u32);
    buf.extend_from_slice(&meta);
    for theta in [ckpt.policy.theta(), ckpt.reference.theta()] {
        for v in theta.iter() {
            buf.write_f64::<LittleEndian>(*v).expect("vec write");
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, LearnError> {
    let mut cur = Cursor::new(bytes);
    let corrupt = |cur: &Cursor<&[u8]>, reason: &str| LearnError::Corrupt {
        offset: cur.position(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| corrupt(&cur, "truncated header"))?;
    if &magic != MAGIC {
        return Err(LearnError::Corrupt { offset: 0, reason: "bad magic".into() });
    }
    let read_u32 = |cur: &mut Cursor<&[u8]>| cur.read_u32::<LittleEndian>();
    let version = read_u32(&mut cur).map_err(|_| corrupt(&cur, "truncated header"))?;
    if version != VERSION {
        return Err(LearnError::Corrupt {
            offset: 8,
            reason: format!("unsupported version {version}"),
        });
    }
    let k = read_u32(&mut cur).map_err(|_| corrupt(&cur, "truncated header"))? as usize;
    let d = read_u32(&mut cur).map_err(|_| corrupt(&cur, "truncated header"))? as usize;
    let hash_offset = cur.position();
    let mut hash = [0u8; 32];
    cur.read_exact(&mut hash).map_err(|_| corrupt(&cur, "truncated spec hash"))?;
    let meta_len = read_u32(&mut cur).map_err(|_| corrupt(&cur, "truncated meta length"))? as usize;
    let meta_offset = cur.position();
    let remaining = bytes.len() as u64 - meta_offset;
    if meta_len as u64 > remaining {
        return Err(corrupt(&cur, "meta length exceeds file"));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    cur.read_exact(&mut meta_bytes).map_err(|_| corrupt(&cur, "truncated meta"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes).map_err(|e| LearnError::Corrupt {
        offset: meta_offset,
        reason: format!("meta: {e}"),
    })?;
    let spec = meta.feature_spec.clone();
    if hex::encode(hash) != spec.hash() {
        return Err(LearnError::Corrupt {
            offset: hash_offset,
            reason: format!("feature spec hash {} does not match {}", hex::encode(hash), spec.hash()),
        });
    }
    if spec.k() != k || spec.dim() != d {
        return Err(LearnError::Corrupt {
            offset: 12,
            reason: format!("header shape {k}x{d} disagrees with feature spec"),
        });
    }
    let read_matrix = |cur: &mut Cursor<&[u8]>| -> Result<Array2<f64>, LearnError> {
        let mut v = vec![0.0; k * d];
        for x in v.iter_mut() {
            *x = cur.read_f64::<LittleEndian>().map_err(|_| corrupt(cur, "truncated parameters"))?;
        }
        Ok(Array2::from_shape_vec((k, d), v).expect("shape"))
    };
    let theta = read_matrix(&mut cur)?;
    let theta_ref = read_matrix(&mut cur)?;
    let body_end = cur.position() as usize;
    let mut digest = [0u8; 32];
    cur.read_exact(&mut digest).map_err(|_| corrupt(&cur, "truncated checksum"))?;
    if cur.position() as usize != bytes.len() {
        return Err(corrupt(&cur, "trailing bytes"));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(LearnError::Corrupt {
            offset: body_end as u64,
            reason: "checksum mismatch".into(),
        });
    }
    let policy = TransitionPolicy::new(spec.clone(), theta).map_err(|e| LearnError::Corrupt {
        offset: meta_offset + meta_len as u64,
        reason: e.to_string(),
    })?;
    let reference = TransitionPolicy::new(spec, theta_ref).map_err(|e| LearnError::Corrupt {
        offset: meta_offset + (meta_len + 8 * k * d) as u64,
        reason: e.to_string(),
    })?;
    Ok(Checkpoint { policy, reference, meta })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), LearnError> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

/// Loads a checkpoint; when `expected` is given its feature spec must match.
pub fn load_checkpoint(path: &Path, expected: Option<&FeatureSpec>) -> Result<Checkpoint, LearnError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let ckpt = decode_checkpoint(&bytes)?;
    if let Some(spec) = expected {
        if spec != ckpt.policy.spec() {
            return Err(LearnError::SpecMismatch {
                expected: spec.hash(),
                found: ckpt.policy.spec().hash(),
            });
        }
    }
    Ok(ckpt)
}
