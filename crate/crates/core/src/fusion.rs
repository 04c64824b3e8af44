//! Fusion inference: each retrieved candidate is read together with the
//! query, and the per-candidate class distributions are mixed with weights
//! `p_R = softmax(raw scores)`.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{dual_retrieve, score, Index, IndexError, MergePolicy, ProjectionHead};
use crate::noise::{fnv1a, splitmix64};
use crate::reader::{score_context, ReadContext, Reader, ReaderError};
use crate::types::{argmax, softmax, HeadTag, IndexRecord, Query, TaskKind, TypeError};

pub const PREDICTIONS_FORMAT: &str = "ragdistill-predictions";
pub const PREDICTIONS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no candidates to fuse")]
    EmptyCandidates,
    #[error("mode {mode} is unsupported: {reason}")]
    UnsupportedMode { mode: InferenceMode, reason: String },
    #[error("reranker chose candidate {choice} of {len} for query {query_id}")]
    ChoiceOutOfRange { query_id: String, choice: usize, len: usize },
    #[error("reader failed on query {query_id}: {error}")]
    Reader { query_id: String, error: ReaderError },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("malformed prediction dump: {0}")]
    MalformedDump(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Fused,
    Top1,
    MaxConfidence,
    MeanConfidence,
    Reranked,
    NoRetrieval,
    RandomRetrieval,
    NoQueryImage,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 8] = [
        InferenceMode::Fused,
        InferenceMode::Top1,
        InferenceMode::MaxConfidence,
        InferenceMode::MeanConfidence,
        InferenceMode::Reranked,
        InferenceMode::NoRetrieval,
        InferenceMode::RandomRetrieval,
        InferenceMode::NoQueryImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Fused => "fused",
            InferenceMode::Top1 => "top1",
            InferenceMode::MaxConfidence => "max_confidence",
            InferenceMode::MeanConfidence => "mean_confidence",
            InferenceMode::Reranked => "reranked",
            InferenceMode::NoRetrieval => "no_retrieval",
            InferenceMode::RandomRetrieval => "random_retrieval",
            InferenceMode::NoQueryImage => "no_query_image",
        }
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InferenceMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown inference mode {s:?}"))
    }
}

/// One element of a reader prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextItem {
    /// A retrieved (image, caption) pair.
    Retrieved { record_id: u64, payload_ref: String },
    /// The query (image, question) pair; always last.
    Query { query_id: String },
}

pub type ContextPlan = Vec<ContextItem>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStyle {
    /// One plan per candidate: `[candidate, query]`.
    Fused,
    /// One plan with every candidate in retrieval order, then the query.
    MultiShot,
    /// The query alone; candidates are ignored.
    NoRetrieval,
}

/// Lay out reader prompts for a retrieved list.
pub fn assemble_context(candidates: &[&IndexRecord], query: &Query, style: PlanStyle) -> Vec<ContextPlan> {
    let q = || ContextItem::Query { query_id: query.query_id.clone() };
    let item = |r: &&IndexRecord| ContextItem::Retrieved { record_id: r.record_id, payload_ref: r.payload_ref.clone() };
    match style {
        PlanStyle::NoRetrieval => vec![vec![q()]],
        PlanStyle::Fused if candidates.is_empty() => vec![vec![q()]],
        PlanStyle::Fused => candidates.iter().map(|r| vec![item(r), q()]).collect(),
        PlanStyle::MultiShot => vec![candidates.iter().map(item).chain(std::iter::once(q())).collect()],
    }
}

/// `p_R = softmax(scores)` with unit temperature.
pub fn retrieval_weights(scores: &[f64]) -> Result<Vec<f64>, FusionError> {
    if scores.is_empty() {
        return Err(FusionError::EmptyCandidates);
    }
    Ok(softmax(scores, 1.0)?)
}

/// `Σ_k p_R_k · dist_k`, renormalized.
pub fn fuse(candidate_dists: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>, FusionError> {
    if candidate_dists.is_empty() {
        return Err(FusionError::EmptyCandidates);
    }
    if candidate_dists.len() != weights.len() {
        return Err(FusionError::LengthMismatch(candidate_dists.len(), weights.len()));
    }
    let n = candidate_dists[0].len();
    let mut fused = vec![0.0; n];
    for (row, w) in candidate_dists.iter().zip(weights) {
        if row.len() != n {
            return Err(FusionError::LengthMismatch(n, row.len()));
        }
        for (f, p) in fused.iter_mut().zip(row) {
            *f += w * p;
        }
    }
    let total: f64 = fused.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(TypeError::NotNormalized(total).into());
    }
    for f in &mut fused {
        *f /= total;
    }
    Ok(fused)
}

/// Picks one candidate per query.
pub trait Reranker: Send + Sync {
    fn name(&self) -> String;
    fn choose(&self, prediction: &FusedPrediction) -> Result<usize, FusionError>;
}

/// Everything one query produced under one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedPrediction {
    pub query_id: String,
    pub mode: InferenceMode,
    pub task_kind: TaskKind,
    pub class_labels: Vec<String>,
    pub gold: String,
    /// Candidates in the order they were weighted; empty for no_retrieval.
    pub record_ids: Vec<u64>,
    pub raw_scores: Vec<f64>,
    /// `p_R` over the candidates.
    pub weights: Vec<f64>,
    pub candidate_dists: Vec<Vec<f64>>,
    pub candidate_labels: Vec<String>,
    /// The `p_R` mixture (the reader's query-only answer for no_retrieval).
    pub fused: Vec<f64>,
    /// Distribution the mode's label was read from.
    pub distribution: Vec<f64>,
    pub predicted: String,
}

impl FusedPrediction {
    pub fn is_correct(&self) -> bool {
        self.predicted == self.gold
    }

    pub fn fused_label(&self) -> &str {
        label_of(&self.class_labels, &self.fused)
    }

    /// Argmax of the candidate-averaged distribution.
    pub fn mean_confidence_label(&self) -> &str {
        if self.candidate_dists.is_empty() {
            return self.fused_label();
        }
        label_of(&self.class_labels, &mean_rows(&self.candidate_dists))
    }

    /// Index of the row holding the single largest probability (first wins).
    pub fn max_confidence_candidate(&self) -> Option<usize> {
        let peaks: Vec<f64> = self
            .candidate_dists
            .iter()
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        argmax(&peaks)
    }

    /// Re-derive the label under another candidate-based mode, without new
    /// reader calls.
    pub fn with_mode(&self, mode: InferenceMode, reranker: Option<&dyn Reranker>) -> Result<FusedPrediction, FusionError> {
        let mut out = self.clone();
        out.mode = mode;
        out.distribution = match mode {
            InferenceMode::Fused => self.fused.clone(),
            InferenceMode::Top1 => self.row(0)?.clone(),
            InferenceMode::MaxConfidence => {
                self.row(self.max_confidence_candidate().ok_or(FusionError::EmptyCandidates)?)?.clone()
            }
            InferenceMode::MeanConfidence => {
                if self.candidate_dists.is_empty() {
                    return Err(FusionError::EmptyCandidates);
                }
                mean_rows(&self.candidate_dists)
            }
            InferenceMode::Reranked => {
                let reranker = reranker.ok_or_else(|| FusionError::UnsupportedMode {
                    mode,
                    reason: "no reranker configured".into(),
                })?;
                let choice = reranker.choose(self)?;
                self.candidate_dists
                    .get(choice)
                    .ok_or(FusionError::ChoiceOutOfRange {
                        query_id: self.query_id.clone(),
                        choice,
                        len: self.candidate_dists.len(),
                    })?
                    .clone()
            }
            other => {
                return Err(FusionError::UnsupportedMode {
                    mode: other,
                    reason: "needs fresh retrieval or reader calls".into(),
                })
            }
        };
        out.predicted = label_of(&out.class_labels, &out.distribution).to_owned();
        Ok(out)
    }

    fn row(&self, i: usize) -> Result<&Vec<f64>, FusionError> {
        self.candidate_dists.get(i).ok_or(FusionError::EmptyCandidates)
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows[0].len();
    let mut mean = vec![0.0; n];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / rows.len() as f64;
        }
    }
    mean
}

fn label_of<'a>(labels: &'a [String], dist: &[f64]) -> &'a str {
    &labels[argmax(dist).expect("non-empty distribution")]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Candidates read per query.
    pub k: usize,
    pub merge: MergePolicy,
    /// Seed for random_retrieval.
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { k: 4, merge: MergePolicy::UnionRerank, seed: 7 }
    }
}

/// The two retrieval heads used at inference.
#[derive(Debug, Clone, Copy)]
pub struct Heads<'a> {
    pub text: &'a ProjectionHead,
    pub image: &'a ProjectionHead,
}

fn read(reader: &dyn Reader, ctx: ReadContext<'_>) -> Result<Vec<f64>, FusionError> {
    score_context(reader, &ctx).map_err(|error| FusionError::Reader { query_id: ctx.query.query_id.clone(), error })
}

/// `k` records drawn uniformly without replacement, keyed by `(seed, query_id)`.
/// Each is scored with the better of the two heads.
fn random_candidates(
    query: &Query,
    index: &Index,
    heads: Heads<'_>,
    config: &InferenceConfig,
) -> Result<Vec<(u64, f64)>, FusionError> {
    let k = config.k.min(index.len());
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ fnv1a(&query.query_id)));
    let mut picks: Vec<usize> = sample(&mut rng, index.len(), k).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|i| {
            let r = &index.records()[i];
            let t = score(&query.image_emb, r, HeadTag::Text, heads.text)?;
            let m = score(&query.image_emb, r, HeadTag::Image, heads.image)?;
            Ok((r.record_id, t.max(m)))
        })
        .collect()
}

/// Predict one query under `mode`.
pub fn predict(
    query: &Query,
    index: &Index,
    heads: Heads<'_>,
    reader: &dyn Reader,
    config: &InferenceConfig,
    mode: InferenceMode,
    reranker: Option<&dyn Reranker>,
) -> Result<FusedPrediction, FusionError> {
    if config.k == 0 {
        return Err(FusionError::EmptyCandidates);
    }
    let class_labels = query.class_vocab.labels().to_vec();
    let blank = |dist: Vec<f64>| FusedPrediction {
        query_id: query.query_id.clone(),
        mode,
        task_kind: query.task_kind,
        class_labels: class_labels.clone(),
        gold: query.gold_answer.clone(),
        record_ids: Vec::new(),
        raw_scores: Vec::new(),
        weights: Vec::new(),
        candidate_dists: Vec::new(),
        candidate_labels: Vec::new(),
        predicted: label_of(&class_labels, &dist).to_owned(),
        fused: dist.clone(),
        distribution: dist,
    };
    if mode == InferenceMode::NoRetrieval {
        return Ok(blank(read(reader, ReadContext::new(query, None))?));
    }
    if mode == InferenceMode::NoQueryImage && !reader.supports_imageless() {
        return Err(FusionError::UnsupportedMode { mode, reason: "reader cannot score without the query image".into() });
    }
    let scored: Vec<(u64, f64)> = if mode == InferenceMode::RandomRetrieval {
        random_candidates(query, index, heads, config)?
    } else {
        let k = config.k.min(index.len());
        let mut set = dual_retrieve(&query.query_id, &query.image_emb, index, heads.text, heads.image, k, config.merge)?;
        set.truncate(config.k);
        set.candidates.iter().map(|c| (c.record_id, c.raw_score)).collect()
    };
    let mut dists = Vec::with_capacity(scored.len());
    for (id, _) in &scored {
        let record = index.get(*id).expect("retrieved ids exist");
        let ctx = ReadContext::new(query, Some(record));
        let ctx = if mode == InferenceMode::NoQueryImage { ctx.without_query_image() } else { ctx };
        dists.push(read(reader, ctx)?);
    }
    let raw_scores: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let weights = retrieval_weights(&raw_scores)?;
    let fused = fuse(&dists, &weights)?;
    let candidate_labels = dists.iter().map(|d| label_of(&class_labels, d).to_owned()).collect();
    let base = FusedPrediction {
        record_ids: scored.iter().map(|s| s.0).collect(),
        raw_scores,
        weights,
        candidate_dists: dists,
        candidate_labels,
        mode: InferenceMode::Fused,
        ..blank(fused)
    };
    match mode {
        InferenceMode::RandomRetrieval | InferenceMode::NoQueryImage => Ok(FusedPrediction { mode, ..base }),
        other => base.with_mode(other, reranker),
    }
}

/// Predict every closed-set query, in query order. Open questions are skipped.
#[allow(clippy::too_many_arguments)]
pub fn predict_all(
    queries: &[Query],
    index: &Index,
    heads: Heads<'_>,
    reader: &dyn Reader,
    config: &InferenceConfig,
    mode: InferenceMode,
    reranker: Option<&dyn Reranker>,
    workers: usize,
) -> Result<Vec<FusedPrediction>, FusionError> {
    let closed: Vec<&Query> = queries.iter().filter(|q| q.task_kind.is_closed_set()).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    pool.install(|| {
        closed
            .par_iter()
            .map(|q| predict(q, index, heads, reader, config, mode, reranker))
            .collect()
    })
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    format: String,
    version: u32,
}

pub fn write_predictions<W: Write>(predictions: &[FusedPrediction], mut out: W) -> std::io::Result<()> {
    let header = DumpHeader { format: PREDICTIONS_FORMAT.into(), version: PREDICTIONS_VERSION };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for p in predictions {
        writeln!(out, "{}", serde_json::to_string(p).expect("prediction serializes"))?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(input: R) -> Result<Vec<FusedPrediction>, FusionError> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| FusionError::MalformedDump("empty file".into()))??;
    let header: DumpHeader =
        serde_json::from_str(&header).map_err(|e| FusionError::MalformedDump(format!("header: {e}")))?;
    if header.format != PREDICTIONS_FORMAT || header.version != PREDICTIONS_VERSION {
        return Err(FusionError::MalformedDump(format!("unsupported {} v{}", header.format, header.version)));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FusionError::MalformedDump(format!("line {}: {e}", n + 2)))?);
    }
    Ok(out)
}
