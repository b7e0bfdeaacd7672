//! Per-variable similarity graph over trial units.
//!
//! Each variable (every registered trial-level variable plus the outcome
//! measure and the arm) is embedded separately. Upper-triangular cosine
//! entries at or above `delta` are sent to a judge; accepted pairs become
//! variable-labelled edges, and two units with at least `m` edges form an
//! approximate counterfactual pair.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;
use std::io::Write;
use std::time::Duration;

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::trial_model::{Corpus, TrialConfig, TrialError, UnitRef, ARM, OUTCOME_MEASURE};

pub const EMBED_API_KEY_ENV: &str = "EMBED_API_KEY";
pub const JUDGE_API_KEY_ENV: &str = "JUDGE_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("non-finite embedding entry")]
    NonFinite,
    #[error("embeddings belong to different variables: `{0}` vs `{1}`")]
    VariableMismatch(String, String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("similarity threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("edge-count threshold M must be >= 1")]
    InvalidEdgeCount,
    #[error(transparent)]
    Trial(#[from] TrialError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub variable_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_ref: Option<UnitRef>,
}

/// Text embedding backend. Implementations must return one vector per input
/// text, with a fixed dimension per variable.
pub trait Embedder: Send + Sync {
    fn embed_batch(&self, variable: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, SimilarityError>;
}

/// Decides whether two variable values describe the same underlying thing.
pub trait Judge: Send + Sync {
    fn aligned(&self, variable: &str, a: &str, b: &str) -> Result<bool, SimilarityError>;
}

/// Deterministic feature-hashed character n-gram embedder.
#[derive(Clone, Debug)]
pub struct OfflineEmbedder {
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for OfflineEmbedder {
    fn default() -> Self {
        Self {
            dim: 256,
            ngram_min: 2,
            ngram_max: 4,
        }
    }
}

fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl OfflineEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>, SimilarityError> {
        let norm = normalize_text(text);
        if norm.is_empty() {
            return Err(SimilarityError::EmptyText);
        }
        let chars: Vec<char> = format!(" {norm} ").chars().collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = String::new();
        for n in self.ngram_min..=self.ngram_max {
            for w in chars.windows(n) {
                buf.clear();
                buf.extend(w.iter());
                let mut h = fnv::FnvHasher::default();
                h.write(buf.as_bytes());
                v[(h.finish() % self.dim as u64) as usize] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(SimilarityError::ZeroNorm);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

impl Embedder for OfflineEmbedder {
    fn embed_batch(&self, _variable: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, SimilarityError> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

/// Lowercased alphanumeric tokens.
pub fn normalized_tokens(text: &str) -> std::collections::BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let (ta, tb) = (normalized_tokens(a), normalized_tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 1.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Accepts a pair when the normalized-token Jaccard index reaches `threshold`.
#[derive(Clone, Debug)]
pub struct OfflineJudge {
    pub threshold: f64,
}

impl Default for OfflineJudge {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl Judge for OfflineJudge {
    fn aligned(&self, _variable: &str, a: &str, b: &str) -> Result<bool, SimilarityError> {
        Ok(token_jaccard(a, b) >= self.threshold)
    }
}

#[derive(Clone, Debug)]
struct HttpClient {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retries: u32,
    backoff: Duration,
}

impl HttpClient {
    fn new(url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.to_string(),
            api_key,
            agent,
            retries: 3,
            backoff: Duration::from_millis(200),
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp, SimilarityError> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let mut req = self.agent.post(&self.url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<Resp>() {
                    Ok(v) => return Ok(v),
                    // a malformed body will not improve on retry
                    Err(e) => return Err(SimilarityError::Provider(format!("{}: {e}", self.url))),
                },
                Err(e) => {
                    log::warn!("{} attempt {} failed: {e}", self.url, attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(SimilarityError::Provider(format!(
            "{} failed after {} attempts: {last}",
            self.url,
            self.retries + 1
        )))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
    variable: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Remote embedding service speaking `{"texts", "variable"} -> {"embeddings"}`.
#[derive(Clone, Debug)]
pub struct HttpEmbedder {
    client: HttpClient,
}

impl HttpEmbedder {
    pub fn new(url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            client: HttpClient::new(url, api_key, timeout),
        }
    }

    /// Reads the key from `EMBED_API_KEY`.
    pub fn from_env(url: &str, timeout: Duration) -> Self {
        Self::new(url, std::env::var(EMBED_API_KEY_ENV).ok(), timeout)
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.client.retries = retries;
        self.client.backoff = backoff;
        self
    }
}

impl Embedder for HttpEmbedder {
    fn embed_batch(&self, variable: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, SimilarityError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(SimilarityError::EmptyText);
        }
        let resp: EmbedResponse = self.client.post(&EmbedRequest { texts, variable })?;
        if resp.embeddings.len() != texts.len() {
            return Err(SimilarityError::Provider(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.embeddings.len()
            )));
        }
        if let Some(first) = resp.embeddings.first() {
            if let Some(bad) = resp.embeddings.iter().find(|e| e.len() != first.len()) {
                return Err(SimilarityError::DimensionMismatch(first.len(), bad.len()));
            }
        }
        Ok(resp.embeddings)
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    a: &'a str,
    b: &'a str,
    variable: &'a str,
}

#[derive(Deserialize)]
struct JudgeResponse {
    aligned: bool,
}

/// Remote judge speaking `{"a", "b", "variable"} -> {"aligned"}`.
#[derive(Clone, Debug)]
pub struct HttpJudge {
    client: HttpClient,
}

impl HttpJudge {
    pub fn new(url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            client: HttpClient::new(url, api_key, timeout),
        }
    }

    /// Reads the key from `JUDGE_API_KEY`.
    pub fn from_env(url: &str, timeout: Duration) -> Self {
        Self::new(url, std::env::var(JUDGE_API_KEY_ENV).ok(), timeout)
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.client.retries = retries;
        self.client.backoff = backoff;
        self
    }
}

impl Judge for HttpJudge {
    fn aligned(&self, variable: &str, a: &str, b: &str) -> Result<bool, SimilarityError> {
        let resp: JudgeResponse = self.client.post(&JudgeRequest { a, b, variable })?;
        Ok(resp.aligned)
    }
}

pub fn embed_variable(
    text: &str,
    variable_name: &str,
    provider: &dyn Embedder,
) -> Result<Embedding, SimilarityError> {
    if text.trim().is_empty() {
        return Err(SimilarityError::EmptyText);
    }
    let mut out = provider.embed_batch(variable_name, &[text.to_string()])?;
    let values = out.pop().ok_or_else(|| SimilarityError::Provider("empty response".into()))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SimilarityError::NonFinite);
    }
    Ok(Embedding {
        values,
        variable_name: variable_name.to_string(),
        unit_ref: None,
    })
}

/// Cosine of two raw vectors.
pub fn cosine_values(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, SimilarityError> {
    if a.variable_name != b.variable_name {
        return Err(SimilarityError::VariableMismatch(
            a.variable_name.clone(),
            b.variable_name.clone(),
        ));
    }
    cosine_values(&a.values, &b.values)
}

/// Text of one variable of a unit, as fed to the embedder and the judge.
pub fn unit_variable_text(cfg: &TrialConfig, variable: &str) -> Option<String> {
    let text = match variable {
        OUTCOME_MEASURE => {
            let om = &cfg.outcome_measure;
            if om.timeframe.trim().is_empty() {
                om.title.clone()
            } else {
                format!("{}; {}", om.title, om.timeframe)
            }
        }
        ARM => {
            let arm = &cfg.arm;
            let mut parts = vec![arm.label.clone()];
            parts.extend(arm.drug_names.iter().cloned());
            if !arm.dose_text.trim().is_empty() {
                parts.push(arm.dose_text.clone());
            }
            parts.join("; ")
        }
        name => cfg.variables.get(name)?.value.clone(),
    };
    (!text.trim().is_empty()).then_some(text)
}

/// One variable's texts and embeddings over the node list. `None` marks a
/// unit without a value for the variable; such units never receive edges
/// on it.
#[derive(Clone, Debug)]
pub struct VariableColumn {
    pub variable: String,
    pub texts: Vec<Option<String>>,
    pub embeddings: Vec<Option<Embedding>>,
}

const EMBED_CHUNK: usize = 64;

/// Embeds each distinct text once and fans the vectors back out to units.
pub fn embed_column(
    corpus: &Corpus,
    units: &[UnitRef],
    variable: &str,
    provider: &dyn Embedder,
) -> Result<VariableColumn, SimilarityError> {
    let mut texts = Vec::with_capacity(units.len());
    for u in units {
        let cfg = corpus.config(u)?;
        let text = unit_variable_text(&cfg, variable);
        if text.is_none() {
            log::warn!("{u}: no `{variable}` value, skipped for this variable");
        }
        texts.push(text);
    }
    let mut distinct: Vec<String> = texts.iter().flatten().cloned().collect();
    distinct.sort();
    distinct.dedup();
    let mut vectors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for chunk in distinct.chunks(EMBED_CHUNK) {
        let embedded = provider.embed_batch(variable, chunk)?;
        if embedded.len() != chunk.len() {
            return Err(SimilarityError::Provider(format!(
                "expected {} embeddings, got {}",
                chunk.len(),
                embedded.len()
            )));
        }
        for (t, v) in chunk.iter().zip(embedded) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SimilarityError::NonFinite);
            }
            vectors.insert(t.as_str(), v);
        }
    }
    let embeddings = texts
        .iter()
        .zip(units)
        .map(|(t, u)| {
            t.as_ref().map(|t| Embedding {
                values: vectors[t.as_str()].clone(),
                variable_name: variable.to_string(),
                unit_ref: Some(u.clone()),
            })
        })
        .collect();
    Ok(VariableColumn {
        variable: variable.to_string(),
        texts,
        embeddings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub i: usize,
    pub j: usize,
    pub cosine: f64,
}

/// Streams every upper-triangular entry (i < j) in `block`-sized tiles.
/// Units without an embedding are skipped.
pub fn for_each_upper_entry<F>(
    embeddings: &[Option<Embedding>],
    block: usize,
    mut f: F,
) -> Result<(), SimilarityError>
where
    F: FnMut(SimilarityEntry) -> Result<(), SimilarityError>,
{
    let n = embeddings.len();
    let block = block.max(1);
    for bi in (0..n).step_by(block) {
        for bj in (bi..n).step_by(block) {
            for i in bi..(bi + block).min(n) {
                let Some(a) = &embeddings[i] else { continue };
                let lo = bj.max(i + 1);
                for (j, b) in embeddings.iter().enumerate().take((bj + block).min(n)).skip(lo) {
                    let Some(b) = b else { continue };
                    f(SimilarityEntry {
                        i,
                        j,
                        cosine: cosine(a, b)?,
                    })?;
                }
            }
        }
    }
    Ok(())
}

/// All upper-triangular entries, sorted by (i, j). Intended for small N;
/// graph construction uses the streaming form.
pub fn build_similarity_matrix(
    embeddings: &[Option<Embedding>],
    block: usize,
) -> Result<Vec<SimilarityEntry>, SimilarityError> {
    let mut out = Vec::new();
    for_each_upper_entry(embeddings, block, |e| {
        out.push(e);
        Ok(())
    })?;
    out.sort_by_key(|e| (e.i, e.j));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEdge {
    pub from: usize,
    pub to: usize,
    pub from_unit: UnitRef,
    pub to_unit: UnitRef,
    pub variable_name: String,
    pub cosine: f64,
    pub judge_verdict: Verdict,
}

pub fn validate_delta(delta: f64) -> Result<(), SimilarityError> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(SimilarityError::InvalidThreshold(delta))
    }
}

/// Judges every entry with `cosine >= delta`. The returned list holds one
/// record per judged candidate; only `Accepted` ones are graph edges.
pub fn filter_and_judge<I>(
    entries: I,
    delta: f64,
    judge: &dyn Judge,
    column: &VariableColumn,
    units: &[UnitRef],
) -> Result<Vec<SimilarityEdge>, SimilarityError>
where
    I: IntoIterator<Item = SimilarityEntry>,
{
    validate_delta(delta)?;
    let mut cache: HashMap<(String, String), Verdict> = HashMap::new();
    let mut out = Vec::new();
    for e in entries {
        if e.cosine < delta {
            continue;
        }
        let (Some(a), Some(b)) = (&column.texts[e.i], &column.texts[e.j]) else {
            continue;
        };
        let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        let verdict = match cache.get(&key) {
            Some(v) => *v,
            None => {
                let v = match judge.aligned(&column.variable, a, b) {
                    Ok(true) => Verdict::Accepted,
                    Ok(false) => Verdict::Rejected,
                    Err(err) => {
                        log::warn!(
                            "judge failed on {} vs {} ({}): {err}",
                            units[e.i],
                            units[e.j],
                            column.variable
                        );
                        Verdict::Skipped
                    }
                };
                // failures are not cached so a transient error affects one pair only
                if v != Verdict::Skipped {
                    cache.insert(key, v);
                }
                v
            }
        };
        out.push(SimilarityEdge {
            from: e.i,
            to: e.j,
            from_unit: units[e.i].clone(),
            to_unit: units[e.j].clone(),
            variable_name: column.variable.clone(),
            cosine: e.cosine,
            judge_verdict: verdict,
        });
    }
    Ok(out)
}

/// Multigraph over trial units with at most one edge per (pair, variable).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairGraph {
    nodes: Vec<UnitRef>,
    edges: BTreeMap<(usize, usize), BTreeMap<String, SimilarityEdge>>,
}

impl PairGraph {
    pub fn new(nodes: Vec<UnitRef>) -> Self {
        Self {
            nodes,
            edges: BTreeMap::new(),
        }
    }

    pub fn nodes(&self) -> &[UnitRef] {
        &self.nodes
    }

    /// Inserts an accepted, upper-triangular edge. Returns false otherwise
    /// or when the (pair, variable) slot is already taken.
    pub fn add_edge(&mut self, edge: SimilarityEdge) -> bool {
        if edge.judge_verdict != Verdict::Accepted
            || edge.from >= edge.to
            || edge.to >= self.nodes.len()
        {
            return false;
        }
        let slot = self.edges.entry((edge.from, edge.to)).or_default();
        if slot.contains_key(&edge.variable_name) {
            return false;
        }
        slot.insert(edge.variable_name.clone(), edge);
        true
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeMap::len).sum()
    }

    pub fn connected_pairs(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = &SimilarityEdge> {
        self.edges.values().flat_map(|m| m.values())
    }

    pub fn write_edges<W: Write>(&self, mut w: W) -> Result<(), SimilarityError> {
        for e in self.edges() {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApproxPair {
    pub a: UnitRef,
    pub b: UnitRef,
    pub edge_count: usize,
    pub variables: Vec<String>,
}

/// Pairs with at least `m` edges, by edge count descending then node order.
pub fn m_approximate_pairs(graph: &PairGraph, m: usize) -> Result<Vec<ApproxPair>, SimilarityError> {
    if m < 1 {
        return Err(SimilarityError::InvalidEdgeCount);
    }
    let mut hits: Vec<_> = graph.edges.iter().filter(|(_, e)| e.len() >= m).collect();
    hits.sort_by(|x, y| y.1.len().cmp(&x.1.len()).then(x.0.cmp(y.0)));
    Ok(hits
        .into_iter()
        .map(|(&(i, j), e)| ApproxPair {
            a: graph.nodes[i].clone(),
            b: graph.nodes[j].clone(),
            edge_count: e.len(),
            variables: e.keys().cloned().collect(),
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct GraphParams {
    pub delta: f64,
    pub block: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            delta: 0.8,
            block: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphBuild {
    pub graph: PairGraph,
    /// Every judged candidate, including rejected and skipped ones.
    pub judged: Vec<SimilarityEdge>,
}

/// Builds the pair graph over every reported unit of the corpus. Variables
/// are processed independently (in parallel on the current rayon pool) and
/// merged in the given order.
pub fn build_pair_graph(
    corpus: &Corpus,
    variables: &[String],
    embedder: &dyn Embedder,
    judge: &dyn Judge,
    params: &GraphParams,
) -> Result<GraphBuild, SimilarityError> {
    validate_delta(params.delta)?;
    let units = corpus.units();
    let per_variable: Vec<Vec<SimilarityEdge>> = variables
        .par_iter()
        .map(|var| {
            let column = embed_column(corpus, &units, var, embedder)?;
            let mut candidates = Vec::new();
            for_each_upper_entry(&column.embeddings, params.block, |e| {
                if e.cosine >= params.delta {
                    candidates.push(e);
                }
                Ok(())
            })?;
            candidates.sort_by_key(|e| (e.i, e.j));
            filter_and_judge(candidates, params.delta, judge, &column, &units)
        })
        .collect::<Result<_, _>>()?;
    let mut graph = PairGraph::new(units);
    let mut judged = Vec::new();
    for edges in per_variable {
        for e in edges {
            graph.add_edge(e.clone());
            judged.push(e);
        }
    }
    Ok(GraphBuild { graph, judged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(values: &[f64]) -> Embedding {
        Embedding {
            values: values.to_vec(),
            variable_name: "v".into(),
            unit_ref: None,
        }
    }

    #[test]
    fn cosine_examples() {
        let v = emb(&[0.3, -1.2, 2.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&emb(&[1.0, 0.0]), &emb(&[1.0, 1.0])).unwrap();
                assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&emb(&[1.0]), &emb(&[1.0, 0.0])),
            Err(SimilarityError::DimensionMismatch(1, 2))
        ));
        assert!(matches!(
            cosine(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0])),
            Err(SimilarityError::ZeroNorm)
        ));
        let mut other = emb(&[1.0]);
        other.variable_name = "w".into();
        assert!(cosine(&emb(&[1.0]), &other).is_err());
    }

    #[test]
    fn offline_embedder_properties() {
        let e = OfflineEmbedder::default();
        let a = embed_variable("aspirin", "drug", &e).unwrap();
        let b = embed_variable("aspirin", "drug", &e).unwrap();
        assert_eq!(a, b);
        let norm = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let tablets = embed_variable("aspirin tablets", "drug", &e).unwrap();
        let japan = embed_variable("geography: Japan", "drug", &e).unwrap();
        let near = cosine(&a, &tablets).unwrap();
        let far = cosine(&a, &japan).unwrap();
        assert!(near > far, "{near} vs {far}");
        assert!(matches!(
            embed_variable("   ", "drug", &e),
            Err(SimilarityError::EmptyText)
        ));
    }

    #[test]
    fn matrix_entry_counts() {
        let e = OfflineEmbedder::with_dim(32);
        let one = vec![Some(embed_variable("a b", "v", &e).unwrap())];
        assert!(build_similarity_matrix(&one, 4).unwrap().is_empty());
        let three: Vec<_> = ["x", "y", "z"]
            .iter()
            .map(|t| Some(embed_variable(t, "v", &e).unwrap()))
            .collect();
        let entries = build_similarity_matrix(&three, 2).unwrap();
        assert_eq!(
            entries.iter().map(|s| (s.i, s.j)).collect::<Vec<_>>(),
            vec![(0, 1), (0, 2), (1, 2)]
        );
    }

    #[test]
    fn blocking_matches_direct_pairwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let embs: Vec<Option<Embedding>> = (0..10)
            .map(|_| Some(emb(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())))
            .collect();
        for block in [1, 3, 4, 10, 64] {
            let entries = build_similarity_matrix(&embs, block).unwrap();
            assert_eq!(entries.len(), 45);
            for s in entries {
                let (a, b) = (&embs[s.i].as_ref().unwrap().values, &embs[s.j].as_ref().unwrap().values);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert_eq!(s.cosine, (dot / (na * nb)).clamp(-1.0, 1.0));
            }
        }
    }

    fn column(texts: &[&str]) -> (VariableColumn, Vec<UnitRef>) {
        let units: Vec<UnitRef> = (0..texts.len())
            .map(|i| UnitRef::new(format!("T{i}"), "O", "A"))
            .collect();
        (
            VariableColumn {
                variable: "v".into(),
                texts: texts.iter().map(|t| Some(t.to_string())).collect(),
                embeddings: vec![None; texts.len()],
            },
            units,
        )
    }

    #[test]
    fn threshold_is_inclusive() {
        let (col, units) = column(&["same words", "same words", "same words"]);
        let entries = vec![
            SimilarityEntry { i: 0, j: 1, cosine: 0.8 },
            SimilarityEntry { i: 0, j: 2, cosine: 0.7999 },
        ];
        let judged = filter_and_judge(entries, 0.8, &OfflineJudge::default(), &col, &units).unwrap();
        assert_eq!(judged.len(), 1);
        assert_eq!((judged[0].from, judged[0].to), (0, 1));
        assert_eq!(judged[0].judge_verdict, Verdict::Accepted);
        assert!(filter_and_judge(Vec::new(), 0.0, &OfflineJudge::default(), &col, &units).is_err());
    }

    struct FailingJudge;
    impl Judge for FailingJudge {
        fn aligned(&self, _: &str, _: &str, _: &str) -> Result<bool, SimilarityError> {
            Err(SimilarityError::Provider("down".into()))
        }
    }

    #[test]
    fn judge_failure_is_skipped_not_an_edge() {
        let (col, units) = column(&["a", "a"]);
        let judged = filter_and_judge(
            vec![SimilarityEntry { i: 0, j: 1, cosine: 1.0 }],
            0.8,
            &FailingJudge,
            &col,
            &units,
        )
        .unwrap();
        assert_eq!(judged[0].judge_verdict, Verdict::Skipped);
        let mut g = PairGraph::new(units);
        assert!(!g.add_edge(judged[0].clone()));
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn jaccard_judge() {
        let j = OfflineJudge::default();
        assert!(j.aligned("v", "HbA1c change", "hba1c CHANGE").unwrap());
        assert!(!j.aligned("v", "HbA1c change at week 24", "body weight").unwrap());
        assert!((token_jaccard("a b", "b c") - 1.0 / 3.0).abs() < 1e-15);
    }

    fn edge(from: usize, to: usize, var: &str, units: &[UnitRef]) -> SimilarityEdge {
        SimilarityEdge {
            from,
            to,
            from_unit: units[from].clone(),
            to_unit: units[to].clone(),
            variable_name: var.into(),
            cosine: 0.9,
            judge_verdict: Verdict::Accepted,
        }
    }

    #[test]
    fn m_threshold_examples() {
        let units: Vec<UnitRef> = (0..3).map(|i| UnitRef::new(format!("T{i}"), "O", "A")).collect();
        let empty = PairGraph::new(units.clone());
        for m in 1..5 {
            assert!(m_approximate_pairs(&empty, m).unwrap().is_empty());
        }
        let mut g = PairGraph::new(units.clone());
        for v in ["condition", "geography", "outcome_measure"] {
            assert!(g.add_edge(edge(0, 1, v, &units)));
        }
        assert!(!g.add_edge(edge(0, 1, "condition", &units)));
        assert!(g.add_edge(edge(1, 2, "phase", &units)));
        let m3 = m_approximate_pairs(&g, 3).unwrap();
        assert_eq!(m3.len(), 1);
        assert_eq!(m3[0].edge_count, 3);
        assert!(m_approximate_pairs(&g, 4).unwrap().is_empty());
        let m1 = m_approximate_pairs(&g, 1).unwrap();
        assert_eq!(m1.len(), 2);
        assert_eq!(m1[0].edge_count, 3);
        assert!(m_approximate_pairs(&g, 0).is_err());
    }

    #[test]
    fn lower_triangular_edges_rejected() {
        let units: Vec<UnitRef> = (0..2).map(|i| UnitRef::new(format!("T{i}"), "O", "A")).collect();
        let mut g = PairGraph::new(units.clone());
        let mut e = edge(0, 1, "x", &units);
        e.from = 1;
        e.to = 0;
        assert!(!g.add_edge(e));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cosine_symmetric_and_self_similar(
                a in proptest::collection::vec(-10f64..10.0, 6),
                b in proptest::collection::vec(-10f64..10.0, 6),
            ) {
                prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
                let (ea, eb) = (emb(&a), emb(&b));
                let ab = cosine(&ea, &eb).unwrap();
                let ba = cosine(&eb, &ea).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-12);
                prop_assert!((cosine(&ea, &ea).unwrap() - 1.0).abs() <= 1e-12);
                prop_assert!((-1.0..=1.0).contains(&ab));
            }
        }
    }
}
