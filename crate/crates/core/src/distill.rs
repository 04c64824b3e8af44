//! Retriever distillation against a frozen reader.
//!
//! Per query with top-K candidates `e_k` and raw scores `s_k = q·(W e_k + b)`:
//!
//! * reader posterior `p_k ∝ P_reader(gold | candidate k, query)`,
//! * retriever distribution `q_k = softmax(s / τ)`,
//! * loss `KL(p ‖ q)`, gradient `∂L/∂s_k = (q_k − p_k) / τ`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{top_k, Index, IndexError, ProjectionHead};
use crate::reader::{score_candidate, Reader, ReaderError};
use crate::types::{softmax, HeadTag, Query, TypeError};

pub const EPSILON: f64 = 1e-12;
/// Posteriors this close to uniform carry no preference and yield no gradient.
pub const UNIFORM_TOLERANCE: f64 = 1e-9;

pub const LOSS_HISTORY_FORMAT: &str = "ragdistill-loss-history";
pub const LOSS_HISTORY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("all posterior weights are zero")]
    AllZero,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at epoch {epoch} of the {head} head")]
    DivergedLoss { head: HeadTag, epoch: usize },
    #[error("no closed-set queries to train on")]
    NoTrainableQueries,
    #[error("gradient check failed: relative error {0:e}")]
    GradientCheckFailed(f64),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("reader failed on query {query_id}: {error}")]
    Reader { query_id: String, error: ReaderError },
}

/// When training candidates are re-retrieved with the current parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalPolicy {
    /// Once, with the initial parameters.
    Once,
    #[default]
    PerEpoch,
    /// Before every optimizer step (differs from per_epoch only with mini-batches).
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub temperature: f64,
    /// Training candidates per query.
    pub candidates: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub momentum: f64,
    /// Queries per optimizer step; 0 means the full query set.
    pub batch_size: usize,
    pub head_order: Vec<HeadTag>,
    pub retrieval: RetrievalPolicy,
    pub seed: u64,
    pub gradient_check: bool,
    /// Worker threads for per-query terms; reductions are always in query order.
    pub workers: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            candidates: 50,
            learning_rate: 0.05,
            epochs: 100,
            momentum: 0.9,
            batch_size: 0,
            head_order: vec![HeadTag::Text, HeadTag::Image],
            retrieval: RetrievalPolicy::PerEpoch,
            seed: 7,
            gradient_check: false,
            workers: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::InvalidConfig(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.candidates < 2 {
            return bad(format!("need at least 2 candidates per query, got {}", self.candidates));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be ≥ 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.head_order.is_empty() {
            return bad("head order is empty".into());
        }
        if self.head_order.len() == 2 && self.head_order[0] == self.head_order[1] || self.head_order.len() > 2 {
            return bad(format!("head order {:?} repeats a head", self.head_order));
        }
        Ok(())
    }
}

/// `p_k = g_k / Σ g`, computed as a softmax of floored log-probabilities.
pub fn reader_posterior(gold_probs: &[f64]) -> Result<Vec<f64>, DistillError> {
    if gold_probs.is_empty() {
        return Err(DistillError::Type(TypeError::Empty));
    }
    if let Some(i) = gold_probs.iter().position(|g| !g.is_finite()) {
        return Err(DistillError::Type(TypeError::NonFinite(i)));
    }
    if let Some(i) = gold_probs.iter().position(|g| *g < 0.0) {
        return Err(DistillError::Type(TypeError::Negative(i)));
    }
    if gold_probs.iter().all(|g| *g == 0.0) {
        return Err(DistillError::AllZero);
    }
    let logs: Vec<f64> = gold_probs.iter().map(|g| g.max(EPSILON).ln()).collect();
    Ok(softmax(&logs, 1.0)?)
}

pub fn retriever_distribution(scores: &[f64], temperature: f64) -> Result<Vec<f64>, DistillError> {
    Ok(softmax(scores, temperature)?)
}

/// `Σ p log(p / q)` with `q` floored at [`EPSILON`]; terms with `p = 0` vanish.
pub fn kl_loss(p: &[f64], q: &[f64]) -> Result<f64, DistillError> {
    if p.len() != q.len() {
        return Err(DistillError::LengthMismatch(p.len(), q.len()));
    }
    let kl = p
        .iter()
        .zip(q)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk / qk.max(EPSILON)).ln())
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// `∂L/∂s_k = (q_k − p_k) / τ`.
pub fn score_gradient(p: &[f64], q: &[f64], temperature: f64) -> Vec<f64> {
    p.iter().zip(q).map(|(pk, qk)| (qk - pk) / temperature).collect()
}

/// Gradient of the loss with respect to one projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub dim: usize,
    /// Row-major `d × d`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGradient {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, weight: vec![0.0; dim * dim], bias: vec![0.0; dim] }
    }

    pub fn norm(&self) -> f64 {
        self.weight.iter().chain(&self.bias).map(|v| v * v).sum::<f64>().sqrt()
    }

    fn add_scaled(&mut self, other: &HeadGradient, scale: f64) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }
}

/// Chain rule through `s_k = query·(W e_k + b)`:
/// `∂L/∂W = outer(query, Σ_k g_k e_k)`, `∂L/∂b = (Σ_k g_k) query` with
/// `g = (q − p) / τ`.
pub fn loss_gradient(
    p: &[f64],
    q: &[f64],
    temperature: f64,
    candidate_embs: &[Vec<f64>],
    query_emb: &[f64],
) -> Result<HeadGradient, DistillError> {
    if p.len() != q.len() {
        return Err(DistillError::LengthMismatch(p.len(), q.len()));
    }
    if p.len() != candidate_embs.len() {
        return Err(DistillError::LengthMismatch(p.len(), candidate_embs.len()));
    }
    let d = query_emb.len();
    let ds = score_gradient(p, q, temperature);
    let mut mixed = vec![0.0; d];
    for (g, e) in ds.iter().zip(candidate_embs) {
        if e.len() != d {
            return Err(DistillError::LengthMismatch(d, e.len()));
        }
        for (m, x) in mixed.iter_mut().zip(e) {
            *m += g * x;
        }
    }
    let total: f64 = ds.iter().sum();
    let mut grad = HeadGradient::zeros(d);
    for i in 0..d {
        for j in 0..d {
            grad.weight[i * d + j] = query_emb[i] * mixed[j];
        }
        grad.bias[i] = total * query_emb[i];
    }
    Ok(grad)
}

/// Loss of one query as a function of the head parameters, for numerical checks.
pub fn query_loss(
    gold_probs: &[f64],
    temperature: f64,
    candidate_embs: &[Vec<f64>],
    query_emb: &[f64],
    proj: &ProjectionHead,
) -> Result<f64, DistillError> {
    let p = reader_posterior(gold_probs)?;
    let scores: Vec<f64> = candidate_embs
        .iter()
        .map(|e| proj.apply(e).iter().zip(query_emb).map(|(a, b)| a * b).sum())
        .collect();
    kl_loss(&p, &retriever_distribution(&scores, temperature)?)
}

/// Relative deviation `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` between
/// [`loss_gradient`] and central differences of [`query_loss`] with step `h`.
pub fn gradient_check(
    gold_probs: &[f64],
    temperature: f64,
    candidate_embs: &[Vec<f64>],
    query_emb: &[f64],
    proj: &ProjectionHead,
    h: f64,
) -> Result<f64, DistillError> {
    let p = reader_posterior(gold_probs)?;
    let scores: Vec<f64> = candidate_embs
        .iter()
        .map(|e| proj.apply(e).iter().zip(query_emb).map(|(a, b)| a * b).sum())
        .collect();
    let q = retriever_distribution(&scores, temperature)?;
    let analytic = loss_gradient(&p, &q, temperature, candidate_embs, query_emb)?;
    let d = proj.dim;
    let loss_at = |weight: Vec<f64>, bias: Vec<f64>| -> Result<f64, DistillError> {
        let head = ProjectionHead::from_parts(proj.head, d, weight, bias)?;
        query_loss(gold_probs, temperature, candidate_embs, query_emb, &head)
    };
    let mut numeric_grad = HeadGradient::zeros(d);
    for idx in 0..d * d {
        let (mut plus, mut minus) = (proj.weight.clone(), proj.weight.clone());
        plus[idx] += h;
        minus[idx] -= h;
        let numeric = (loss_at(plus, proj.bias.clone())? - loss_at(minus, proj.bias.clone())?) / (2.0 * h);
        numeric_grad.weight[idx] = numeric;
    }
    for idx in 0..d {
        let (mut plus, mut minus) = (proj.bias.clone(), proj.bias.clone());
        plus[idx] += h;
        minus[idx] -= h;
        let numeric = (loss_at(proj.weight.clone(), plus)? - loss_at(proj.weight.clone(), minus)?) / (2.0 * h);
        numeric_grad.bias[idx] = numeric;
    }
    let mut diff = analytic.clone();
    diff.add_scaled(&numeric_grad, -1.0);
    Ok(diff.norm() / analytic.norm().max(numeric_grad.norm()).max(1e-12))
}

/// One line of the loss history. The entry for epoch `e < epochs` holds the
/// loss before that epoch's update; the final entry (`epoch == epochs`)
/// evaluates the trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub head: HeadTag,
    pub mean_kl: f64,
    pub grad_norm: f64,
}

/// Optimizer and progress for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub head: ProjectionHead,
    pub velocity: HeadGradient,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(head: ProjectionHead) -> Self {
        let dim = head.dim;
        Self { head, velocity: HeadGradient::zeros(dim), epoch: 0, history: Vec::new() }
    }

    /// `v ← μ v + g`, `θ ← θ − lr · v`.
    fn step(&mut self, grad: &HeadGradient, lr: f64, momentum: f64) {
        for (v, g) in self.velocity.weight.iter_mut().zip(&grad.weight) {
            *v = momentum * *v + g;
        }
        for (v, g) in self.velocity.bias.iter_mut().zip(&grad.bias) {
            *v = momentum * *v + g;
        }
        for (w, v) in self.head.weight.iter_mut().zip(&self.velocity.weight) {
            *w -= lr * v;
        }
        for (b, v) in self.head.bias.iter_mut().zip(&self.velocity.bias) {
            *b -= lr * v;
        }
    }
}

/// A query with its current candidates and (frozen) gold probabilities.
struct Prepared<'a> {
    query: &'a Query,
    query_emb: Vec<f64>,
    candidate_embs: Vec<Vec<f64>>,
    posterior: Vec<f64>,
    informative: bool,
}

fn prepare<'a>(
    query: &'a Query,
    index: &Index,
    reader: &dyn Reader,
    head: &ProjectionHead,
    k: usize,
) -> Result<Prepared<'a>, DistillError> {
    let gold = query.gold_index().expect("filtered to closed-set queries");
    let set = top_k(&query.query_id, &query.image_emb, index, head.head, head, k)?;
    let mut gold_probs = Vec::with_capacity(set.len());
    let mut candidate_embs = Vec::with_capacity(set.len());
    for c in &set.candidates {
        let record = index.get(c.record_id).expect("retrieved ids exist");
        let probs = score_candidate(reader, query, record)
            .map_err(|error| DistillError::Reader { query_id: query.query_id.clone(), error })?;
        gold_probs.push(probs[gold]);
        candidate_embs.push(record.embedding(head.head).to_f64());
    }
    let posterior = reader_posterior(&gold_probs)?;
    let uniform = 1.0 / posterior.len() as f64;
    let informative = posterior.iter().any(|p| (p - uniform).abs() > UNIFORM_TOLERANCE);
    Ok(Prepared { query, query_emb: query.image_emb.to_f64(), candidate_embs, posterior, informative })
}

fn prepare_all<'a>(
    queries: &[&'a Query],
    index: &Index,
    reader: &dyn Reader,
    head: &ProjectionHead,
    config: &TrainerConfig,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Prepared<'a>>, DistillError> {
    let k = config.candidates.min(index.len());
    pool.install(|| queries.par_iter().map(|q| prepare(q, index, reader, head, k)).collect())
}

/// Loss and gradient of one query under the current head.
fn term(prep: &Prepared<'_>, head: &ProjectionHead, tau: f64) -> Result<(f64, HeadGradient), DistillError> {
    if !prep.informative {
        return Ok((0.0, HeadGradient::zeros(head.dim)));
    }
    let (folded, offset) = head.query_operator(&prep.query_emb);
    let scores: Vec<f64> = prep
        .candidate_embs
        .iter()
        .map(|e| e.iter().zip(&folded).map(|(a, b)| a * b).sum::<f64>() + offset)
        .collect();
    let q = retriever_distribution(&scores, tau)?;
    let loss = kl_loss(&prep.posterior, &q)?;
    let grad = loss_gradient(&prep.posterior, &q, tau, &prep.candidate_embs, &prep.query_emb)?;
    Ok((loss, grad))
}

/// Mean loss and gradient over a batch; summed in batch order.
fn batch_objective(
    batch: &[&Prepared<'_>],
    head: &ProjectionHead,
    tau: f64,
    pool: &rayon::ThreadPool,
) -> Result<(f64, HeadGradient), DistillError> {
    let terms: Vec<(f64, HeadGradient)> =
        pool.install(|| batch.par_iter().map(|p| term(p, head, tau)).collect::<Result<_, _>>())?;
    let n = batch.len() as f64;
    let mut total = HeadGradient::zeros(head.dim);
    let mut loss = 0.0;
    for (l, g) in &terms {
        loss += l;
        total.add_scaled(g, 1.0 / n);
    }
    Ok((loss / n, total))
}

fn or_diverged<T>(r: Result<T, DistillError>, head: HeadTag, epoch: usize) -> Result<T, DistillError> {
    match r {
        Err(DistillError::Type(TypeError::NonFinite(_))) => Err(DistillError::DivergedLoss { head, epoch }),
        other => other,
    }
}

fn thread_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

fn trainable(queries: &[Query]) -> Vec<&Query> {
    queries
        .iter()
        .filter(|q| q.task_kind.is_closed_set() && q.gold_index().is_some())
        .collect()
}

/// Train one head by gradient descent on the mean KL over `queries`.
/// Open questions are skipped. The reader is only read.
pub fn train_head(
    index: &Index,
    queries: &[Query],
    reader: &dyn Reader,
    init: ProjectionHead,
    config: &TrainerConfig,
) -> Result<TrainState, DistillError> {
    config.validate()?;
    let head_tag = init.head;
    let active = trainable(queries);
    if active.is_empty() {
        return Err(DistillError::NoTrainableQueries);
    }
    let pool = thread_pool(config.workers);
    let tau = config.temperature;
    let mut state = TrainState::new(init);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ u64::from(head_tag.as_u8()));
    let batch_size = if config.batch_size == 0 { active.len() } else { config.batch_size.min(active.len()) };

    let mut prepared = prepare_all(&active, index, reader, &state.head, config, &pool)?;
    if config.gradient_check {
        check_first(&prepared, &state.head, tau)?;
    }
    for epoch in 0..config.epochs {
        if epoch > 0 && config.retrieval != RetrievalPolicy::Once {
            prepared = or_diverged(prepare_all(&active, index, reader, &state.head, config, &pool), head_tag, epoch)?;
        }
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        if batch_size < prepared.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_grad = HeadGradient::zeros(state.head.dim);
        let n_batches = order.chunks(batch_size).len() as f64;
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            if config.retrieval == RetrievalPolicy::PerStep && step > 0 {
                let batch_queries: Vec<&Query> = chunk.iter().map(|&i| prepared[i].query).collect();
                let fresh =
                    or_diverged(prepare_all(&batch_queries, index, reader, &state.head, config, &pool), head_tag, epoch)?;
                for (&i, p) in chunk.iter().zip(fresh) {
                    prepared[i] = p;
                }
            }
            let batch: Vec<&Prepared<'_>> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, grad) = or_diverged(batch_objective(&batch, &state.head, tau, &pool), head_tag, epoch)?;
            if !loss.is_finite() {
                return Err(DistillError::DivergedLoss { head: head_tag, epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            epoch_grad.add_scaled(&grad, 1.0 / n_batches);
            state.step(&grad, config.learning_rate, config.momentum);
            if !state.head.is_finite() {
                return Err(DistillError::DivergedLoss { head: head_tag, epoch });
            }
        }
        state.history.push(LossRecord {
            epoch,
            head: head_tag,
            mean_kl: epoch_loss / prepared.len() as f64,
            grad_norm: epoch_grad.norm(),
        });
        state.epoch = epoch + 1;
    }
    let last = config.epochs;
    if config.retrieval != RetrievalPolicy::Once {
        prepared = or_diverged(prepare_all(&active, index, reader, &state.head, config, &pool), head_tag, last)?;
    }
    let all: Vec<&Prepared<'_>> = prepared.iter().collect();
    let (loss, grad) = or_diverged(batch_objective(&all, &state.head, tau, &pool), head_tag, last)?;
    if !loss.is_finite() {
        return Err(DistillError::DivergedLoss { head: head_tag, epoch: config.epochs });
    }
    state.history.push(LossRecord { epoch: config.epochs, head: head_tag, mean_kl: loss, grad_norm: grad.norm() });
    Ok(state)
}

fn check_first(prepared: &[Prepared<'_>], head: &ProjectionHead, tau: f64) -> Result<(), DistillError> {
    let Some(prep) = prepared.iter().find(|p| p.informative) else {
        return Ok(());
    };
    let err = gradient_check(&prep.posterior, tau, &prep.candidate_embs, &prep.query_emb, head, 1e-4)?;
    if err > 1e-5 {
        return Err(DistillError::GradientCheckFailed(err));
    }
    Ok(())
}

/// Both heads after sequential training, with the concatenated loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHeads {
    pub text: ProjectionHead,
    pub image: ProjectionHead,
    pub history: Vec<LossRecord>,
}

/// Train the heads one after another in `config.head_order`. A head absent
/// from the order keeps its initial parameters.
pub fn train_sequential(
    index: &Index,
    queries: &[Query],
    reader: &dyn Reader,
    config: &TrainerConfig,
) -> Result<TrainedHeads, DistillError> {
    config.validate()?;
    let mut out = TrainedHeads {
        text: ProjectionHead::identity(HeadTag::Text, index.dim()),
        image: ProjectionHead::identity(HeadTag::Image, index.dim()),
        history: Vec::new(),
    };
    for &tag in &config.head_order {
        let init = match tag {
            HeadTag::Text => out.text.clone(),
            HeadTag::Image => out.image.clone(),
        };
        let state = train_head(index, queries, reader, init, config)?;
        out.history.extend(state.history);
        match tag {
            HeadTag::Text => out.text = state.head,
            HeadTag::Image => out.image = state.head,
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct HistoryHeader {
    format: String,
    version: u32,
}

pub fn write_loss_history<W: Write>(records: &[LossRecord], mut out: W) -> std::io::Result<()> {
    let header = HistoryHeader { format: LOSS_HISTORY_FORMAT.into(), version: LOSS_HISTORY_VERSION };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}
