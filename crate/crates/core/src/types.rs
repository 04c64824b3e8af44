//! Domain vocabulary shared by retrieval, reading, training and analysis.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating that a vector is a probability distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("all weights are zero")]
    AllZero,
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("negative weight at position {0}")]
    Negative(usize),
    #[error("empty vector")]
    Empty,
    #[error("class vocabulary is empty")]
    EmptyVocab,
    #[error("duplicate class label {0:?}")]
    DuplicateLabel(String),
    #[error("gold answer {0:?} is not in the class vocabulary")]
    GoldNotInVocab(String),
    #[error("embedding dimension {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("distribution does not sum to one (sum = {0})")]
    NotNormalized(f64),
}

/// Normalize non-negative weights into a probability vector.
pub fn normalize_distribution(weights: &[f64]) -> Result<Vec<f64>, TypeError> {
    if weights.is_empty() {
        return Err(TypeError::Empty);
    }
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() {
            return Err(TypeError::NonFinite(i));
        }
        if *w < 0.0 {
            return Err(TypeError::Negative(i));
        }
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(TypeError::AllZero);
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>, TypeError> {
    if logits.is_empty() {
        return Err(TypeError::Empty);
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(TypeError::NonFinite(i));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Check the distribution invariant: entries non-negative and summing to one.
pub fn validate_distribution(probs: &[f64]) -> Result<(), TypeError> {
    if probs.is_empty() {
        return Err(TypeError::Empty);
    }
    for (i, p) in probs.iter().enumerate() {
        if !p.is_finite() {
            return Err(TypeError::NonFinite(i));
        }
        if *p < 0.0 {
            return Err(TypeError::Negative(i));
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(TypeError::NotNormalized(sum));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// A dense embedding. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, TypeError> {
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(TypeError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self, TypeError> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(&a, b)| f64::from(a) * b).sum()
    }

    /// L2-normalized copy; the zero vector is returned unchanged.
    pub fn normalized(&self) -> Self {
        let norm = self.0.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return self.clone();
        }
        Self(self.0.iter().map(|&v| (f64::from(v) / norm) as f32).collect())
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), TypeError> {
        if self.dim() != expected {
            return Err(TypeError::DimensionMismatch { expected, got: self.dim() });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = TypeError;
    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Which retrieval head produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTag {
    Text,
    Image,
}

impl HeadTag {
    pub fn as_u8(self) -> u8 {
        match self {
            HeadTag::Text => 0,
            HeadTag::Image => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(HeadTag::Text),
            1 => Some(HeadTag::Image),
            _ => None,
        }
    }
}

impl fmt::Display for HeadTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadTag::Text => "text",
            HeadTag::Image => "image",
        })
    }
}

impl std::str::FromStr for HeadTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(HeadTag::Text),
            "image" => Ok(HeadTag::Image),
            other => Err(format!("unknown head {other:?}")),
        }
    }
}

/// Parse `key=value` pairs from the fragment of a payload locator
/// (`synth://record/12#label=c1&view=c0`).
pub fn payload_metadata(payload_ref: &str) -> BTreeMap<&str, &str> {
    let Some((_, fragment)) = payload_ref.split_once('#') else {
        return BTreeMap::new();
    };
    fragment
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .collect()
}

/// One corpus item: an (image, caption/report) pair with precomputed embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub record_id: u64,
    pub image_emb: Embedding,
    pub text_emb: Embedding,
    pub payload_ref: String,
    pub source_tag: String,
}

impl IndexRecord {
    pub fn embedding(&self, head: HeadTag) -> &Embedding {
        match head {
            HeadTag::Text => &self.text_emb,
            HeadTag::Image => &self.image_emb,
        }
    }

    /// Label metadata carried in the payload locator, if any.
    pub fn label(&self) -> Option<&str> {
        payload_metadata(&self.payload_ref).get("label").copied()
    }

    pub fn view(&self) -> Option<&str> {
        payload_metadata(&self.payload_ref).get("view").copied()
    }

    /// Caption text forwarded to readers. Records carry no free text, so the
    /// label metadata stands in for the report.
    pub fn caption(&self) -> String {
        self.label().map(str::to_owned).unwrap_or_default()
    }
}

/// Ordered, duplicate-free set of answer strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassVocab(Vec<String>);

impl ClassVocab {
    pub fn new(labels: Vec<String>) -> Result<Self, TypeError> {
        if labels.is_empty() {
            return Err(TypeError::EmptyVocab);
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(TypeError::DuplicateLabel(l.clone()));
            }
        }
        Ok(Self(labels))
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.0[idx]
    }
}

impl TryFrom<Vec<String>> for ClassVocab {
    type Error = TypeError;
    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(labels)
    }
}

impl From<ClassVocab> for Vec<String> {
    fn from(v: ClassVocab) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    VqaClosed,
    VqaOpen,
}

impl TaskKind {
    /// Open questions have no discriminative answer set.
    pub fn is_closed_set(self) -> bool {
        !matches!(self, TaskKind::VqaOpen)
    }
}

/// An evaluation item: query image plus question with its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub image_emb: Embedding,
    pub question: String,
    pub gold_answer: String,
    pub class_vocab: ClassVocab,
    pub task_kind: TaskKind,
    /// Locator of the query image; forwarded to remote readers.
    #[serde(default)]
    pub payload_ref: String,
}

impl Query {
    pub fn validate(&self) -> Result<(), TypeError> {
        if self.task_kind.is_closed_set() && self.class_vocab.index_of(&self.gold_answer).is_none() {
            return Err(TypeError::GoldNotInVocab(self.gold_answer.clone()));
        }
        Ok(())
    }

    pub fn gold_index(&self) -> Option<usize> {
        self.class_vocab.index_of(&self.gold_answer)
    }

    /// Latent label of the query image: payload metadata, else the gold answer.
    pub fn image_label(&self) -> &str {
        payload_metadata(&self.payload_ref)
            .get("label")
            .copied()
            .unwrap_or(&self.gold_answer)
    }

    pub fn view(&self) -> Option<&str> {
        payload_metadata(&self.payload_ref).get("view").copied()
    }
}

pub const QUERIES_FORMAT: &str = "ragdistill-queries";
pub const QUERIES_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct QueriesHeader {
    format: String,
    version: u32,
}

/// JSONL: one header line, then one query per line.
pub fn write_queries<W: std::io::Write>(queries: &[Query], mut out: W) -> std::io::Result<()> {
    let header = QueriesHeader { format: QUERIES_FORMAT.into(), version: QUERIES_VERSION };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for q in queries {
        writeln!(out, "{}", serde_json::to_string(q).expect("query serializes"))?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum QueryFileError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_queries<R: std::io::BufRead>(input: R) -> Result<Vec<Query>, QueryFileError> {
    let bad = |line: usize, message: String| QueryFileError::Malformed { line, message };
    let mut lines = input.lines();
    let header: QueriesHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?).map_err(|e| bad(1, e.to_string()))?,
        None => return Err(bad(1, "missing header".into())),
    };
    if header.format != QUERIES_FORMAT || header.version != QUERIES_VERSION {
        return Err(bad(1, format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?;
        q.validate().map_err(|e| bad(i + 2, e.to_string()))?;
        out.push(q);
    }
    Ok(out)
}

/// One retrieved entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub record_id: u64,
    pub head: HeadTag,
    pub raw_score: f64,
}

/// Retrieval output for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn record_ids(&self) -> Vec<u64> {
        self.candidates.iter().map(|c| c.record_id).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.raw_score).collect()
    }

    /// Score descending, record id ascending.
    pub fn is_canonically_ordered(&self) -> bool {
        self.candidates.windows(2).all(|w| {
            w[0].raw_score > w[1].raw_score
                || (w[0].raw_score == w[1].raw_score && w[0].record_id < w[1].record_id)
        })
    }

    pub fn truncate(&mut self, k: usize) {
        self.candidates.truncate(k);
    }
}
