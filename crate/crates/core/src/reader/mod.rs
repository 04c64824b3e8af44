//! The frozen reader: anything mapping a (candidate, query) context to a
//! class-restricted probability vector.
//!
//! Implementations: [`SimulatedReader`] (synthetic oracle), [`CachedReader`]
//! (serves a stored [`ReaderScoreTable`]) and [`RemoteReader`] (JSON over
//! HTTP). [`MemoReader`] wraps any of them with a write-through table.

mod remote;
mod simulated;
mod table;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{validate_distribution, ClassVocab, IndexRecord, Query, TypeError};

pub use remote::{CandidateBody, RemoteReader, RemoteReaderConfig, ScoreRequestBody, ScoreResponseBody, ENDPOINT_ENV};
pub use simulated::{SimulatedReader, SimulatedReaderParams};
pub use table::{cache_load, cache_store, CachedReader, MemoReader, ReaderScoreTable, ScoreKey, TABLE_FORMAT, TABLE_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReaderError {
    #[error("remote reader unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("malformed response from remote reader: {0}")]
    RemoteMalformedResponse(String),
    #[error("remote reader rejected the request with status {status}: {body}")]
    RemoteRejected { status: u16, body: String },
    #[error("open questions are not scored")]
    OpenQuestionUnsupported,
    #[error("reader cannot score without the query image")]
    ImagelessUnsupported,
    #[error("no cached score for {0}")]
    CacheMiss(String),
    #[error("corrupt cache: {0}")]
    CorruptCache(String),
    #[error("vocabulary mismatch: table has {table:?}, query has {query:?}")]
    VocabMismatch { table: Vec<String>, query: Vec<String> },
    #[error("duplicate score row {0}")]
    DuplicateRow(String),
    #[error("invalid reader parameters: {0}")]
    InvalidParams(String),
    #[error("reader returned an invalid distribution: {0}")]
    InvalidDistribution(#[from] TypeError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ReaderError {
    fn from(e: std::io::Error) -> Self {
        ReaderError::Io(e.to_string())
    }
}

/// What the reader sees: the query, optionally one prepended candidate, and
/// whether the query image is present.
#[derive(Debug, Clone, Copy)]
pub struct ReadContext<'a> {
    pub query: &'a Query,
    pub candidate: Option<&'a IndexRecord>,
    pub query_image: bool,
}

impl<'a> ReadContext<'a> {
    pub fn new(query: &'a Query, candidate: Option<&'a IndexRecord>) -> Self {
        Self { query, candidate, query_image: true }
    }

    pub fn without_query_image(mut self) -> Self {
        self.query_image = false;
        self
    }

    pub fn key(&self) -> ScoreKey {
        ScoreKey {
            query_id: self.query.query_id.clone(),
            record_id: self.candidate.map(|c| c.record_id),
            query_image: self.query_image,
        }
    }
}

pub trait Reader: Send + Sync {
    /// Stable description of the reader and its parameters; caches are keyed by it.
    fn identity(&self) -> String;

    /// Probability vector over `ctx.query.class_vocab`.
    fn read(&self, ctx: &ReadContext<'_>) -> Result<Vec<f64>, ReaderError>;

    fn supports_imageless(&self) -> bool {
        true
    }

    /// Upper bound on concurrent `read` calls.
    fn max_in_flight(&self) -> usize {
        usize::MAX
    }
}

impl<R: Reader + ?Sized> Reader for &R {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn read(&self, ctx: &ReadContext<'_>) -> Result<Vec<f64>, ReaderError> {
        (**self).read(ctx)
    }
    fn supports_imageless(&self) -> bool {
        (**self).supports_imageless()
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

impl<R: Reader + ?Sized> Reader for Box<R> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn read(&self, ctx: &ReadContext<'_>) -> Result<Vec<f64>, ReaderError> {
        (**self).read(ctx)
    }
    fn supports_imageless(&self) -> bool {
        (**self).supports_imageless()
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

/// Score one context, enforcing the task and distribution contracts.
pub fn score_context(reader: &dyn Reader, ctx: &ReadContext<'_>) -> Result<Vec<f64>, ReaderError> {
    if !ctx.query.task_kind.is_closed_set() {
        return Err(ReaderError::OpenQuestionUnsupported);
    }
    if !ctx.query_image && !reader.supports_imageless() {
        return Err(ReaderError::ImagelessUnsupported);
    }
    let probs = reader.read(ctx)?;
    if probs.len() != ctx.query.class_vocab.len() {
        return Err(ReaderError::InvalidDistribution(TypeError::DimensionMismatch {
            expected: ctx.query.class_vocab.len(),
            got: probs.len(),
        }));
    }
    validate_distribution(&probs)?;
    Ok(probs)
}

/// Class distribution for `record` prepended to `query`.
pub fn score_candidate(reader: &dyn Reader, query: &Query, record: &IndexRecord) -> Result<Vec<f64>, ReaderError> {
    score_context(reader, &ReadContext::new(query, Some(record)))
}

/// A failed row in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub key: ScoreKey,
    pub error: ReaderError,
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub table: ReaderScoreTable,
    pub errors: Vec<RowError>,
}

/// Score every `(query, candidate)` pair with up to `workers` concurrent calls
/// (further capped by the reader's in-flight limit). Failures are reported
/// per row; they never abort the batch.
pub fn batch_score(
    reader: &dyn Reader,
    pairs: &[(&Query, &IndexRecord)],
    vocab: &ClassVocab,
    workers: usize,
) -> BatchOutcome {
    let contexts: Vec<ReadContext<'_>> = pairs.iter().map(|(q, r)| ReadContext::new(q, Some(r))).collect();
    batch_score_contexts(reader, &contexts, vocab, workers)
}

pub fn batch_score_contexts(
    reader: &dyn Reader,
    contexts: &[ReadContext<'_>],
    vocab: &ClassVocab,
    workers: usize,
) -> BatchOutcome {
    let n = contexts.len();
    let workers = workers.max(1).min(reader.max_in_flight().max(1)).min(n.max(1));
    let results: Vec<Mutex<Option<Result<Vec<f64>, ReaderError>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let ctx = &contexts[i];
                let r = if ctx.query.class_vocab != *vocab {
                    Err(ReaderError::VocabMismatch {
                        table: vocab.labels().to_vec(),
                        query: ctx.query.class_vocab.labels().to_vec(),
                    })
                } else {
                    score_context(reader, ctx)
                };
                *results[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });
    let mut table = ReaderScoreTable::new(reader.identity(), vocab.clone());
    let mut errors = Vec::new();
    for (ctx, slot) in contexts.iter().zip(results) {
        let key = ctx.key();
        match slot.into_inner().expect("result slot poisoned").expect("every row visited") {
            Ok(p) => {
                if let Err(error) = table.insert(key.clone(), p) {
                    errors.push(RowError { key, error });
                }
            }
            Err(error) => errors.push(RowError { key, error }),
        }
    }
    BatchOutcome { table, errors }
}

/// Spec of which reader to build; serialized into run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReaderSpec {
    Simulated(SimulatedReaderParams),
    Cached { path: std::path::PathBuf },
    Remote(RemoteReaderConfig),
}

impl Default for ReaderSpec {
    fn default() -> Self {
        ReaderSpec::Simulated(SimulatedReaderParams::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Embedding, TaskKind};

    struct Flaky;
    impl Reader for Flaky {
        fn identity(&self) -> String {
            "flaky".into()
        }
        fn read(&self, ctx: &ReadContext<'_>) -> Result<Vec<f64>, ReaderError> {
            match ctx.candidate.map(|c| c.record_id) {
                Some(2) if ctx.query.query_id == "q1" => Err(ReaderError::RemoteUnavailable("down".into())),
                _ => Ok(vec![0.25, 0.75]),
            }
        }
    }

    fn vocab() -> ClassVocab {
        ClassVocab::new(vec!["yes".into(), "no".into()]).unwrap()
    }

    fn query(id: &str, kind: TaskKind) -> Query {
        Query {
            query_id: id.into(),
            image_emb: Embedding::new(vec![0.0]).unwrap(),
            question: "?".into(),
            gold_answer: "yes".into(),
            class_vocab: vocab(),
            task_kind: kind,
            payload_ref: String::new(),
        }
    }

    fn record(id: u64) -> IndexRecord {
        IndexRecord {
            record_id: id,
            image_emb: Embedding::new(vec![0.0]).unwrap(),
            text_emb: Embedding::new(vec![0.0]).unwrap(),
            payload_ref: String::new(),
            source_tag: String::new(),
        }
    }

    #[test]
    fn batch_isolates_row_failures() {
        let (q0, q1) = (query("q0", TaskKind::Classification), query("q1", TaskKind::Classification));
        let (r1, r2) = (record(1), record(2));
        let pairs = vec![(&q0, &r1), (&q0, &r2), (&q1, &r1), (&q1, &r2)];
        let out = batch_score(&Flaky, &pairs, &vocab(), 3);
        assert_eq!(out.table.len(), 3);
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].key.query_id, "q1");
        assert_eq!(out.errors[0].key.record_id, Some(2));
    }

    #[test]
    fn open_questions_are_skipped() {
        let q = query("q", TaskKind::VqaOpen);
        assert_eq!(score_candidate(&Flaky, &q, &record(1)), Err(ReaderError::OpenQuestionUnsupported));
    }
}
