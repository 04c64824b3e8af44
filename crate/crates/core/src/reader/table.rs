use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{ReadContext, Reader, ReaderError};
use crate::types::{validate_distribution, ClassVocab};

pub const TABLE_FORMAT: &str = "ragdistill-score-table";
pub const TABLE_VERSION: u32 = 1;

/// Row key: which query, which prepended record (none for query-only reads),
/// and whether the query image was shown.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScoreKey {
    pub query_id: String,
    pub record_id: Option<u64>,
    pub query_image: bool,
}

impl fmt::Display for ScoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record_id {
            Some(r) => write!(f, "({}, {r})", self.query_id)?,
            None => write!(f, "({}, -)", self.query_id)?,
        }
        if !self.query_image {
            f.write_str(" without query image")?;
        }
        Ok(())
    }
}

/// Stored reader outputs for one reader identity and one class vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderScoreTable {
    reader: String,
    vocab: ClassVocab,
    rows: BTreeMap<ScoreKey, Vec<f64>>,
}

impl ReaderScoreTable {
    pub fn new(reader: impl Into<String>, vocab: ClassVocab) -> Self {
        Self { reader: reader.into(), vocab, rows: BTreeMap::new() }
    }

    pub fn reader_identity(&self) -> &str {
        &self.reader
    }

    pub fn vocab(&self) -> &ClassVocab {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, key: &ScoreKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ScoreKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Insert a validated row. Each key is scored once; re-inserting an
    /// identical row is accepted, a conflicting one is not.
    pub fn insert(&mut self, key: ScoreKey, probs: Vec<f64>) -> Result<(), ReaderError> {
        if probs.len() != self.vocab.len() {
            return Err(ReaderError::CorruptCache(format!(
                "row {key} has {} entries for {} classes",
                probs.len(),
                self.vocab.len()
            )));
        }
        validate_distribution(&probs).map_err(|e| ReaderError::CorruptCache(format!("row {key}: {e}")))?;
        match self.rows.get(&key) {
            Some(existing) if *existing == probs => Ok(()),
            Some(_) => Err(ReaderError::DuplicateRow(key.to_string())),
            None => {
                self.rows.insert(key, probs);
                Ok(())
            }
        }
    }

    /// Merge rows from another table of the same reader and vocabulary.
    pub fn merge(&mut self, other: ReaderScoreTable) -> Result<(), ReaderError> {
        if other.vocab != self.vocab {
            return Err(ReaderError::VocabMismatch {
                table: self.vocab.labels().to_vec(),
                query: other.vocab.labels().to_vec(),
            });
        }
        for (k, v) in other.rows {
            self.insert(k, v)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    format: String,
    version: u32,
    reader: String,
    class_labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    query_id: String,
    record_id: Option<u64>,
    query_image: bool,
    probs: Vec<f64>,
}

/// Write a table as line-delimited JSON: a header line, then one row per line.
pub fn cache_store(table: &ReaderScoreTable, path: impl AsRef<Path>) -> Result<(), ReaderError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header = TableHeader {
        format: TABLE_FORMAT.into(),
        version: TABLE_VERSION,
        reader: table.reader.clone(),
        class_labels: table.vocab.labels().to_vec(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for (key, probs) in &table.rows {
        let row = TableRow {
            query_id: key.query_id.clone(),
            record_id: key.record_id,
            query_image: key.query_image,
            probs: probs.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&row).expect("row serializes"))?;
    }
    out.flush()?;
    Ok(())
}

/// Load a table, validating every row and the class vocabulary.
pub fn cache_load(path: impl AsRef<Path>, expected_vocab: &ClassVocab) -> Result<ReaderScoreTable, ReaderError> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines.next().ok_or_else(|| ReaderError::CorruptCache("empty file".into()))??;
    let header: TableHeader =
        serde_json::from_str(&header_line).map_err(|e| ReaderError::CorruptCache(format!("header: {e}")))?;
    if header.format != TABLE_FORMAT {
        return Err(ReaderError::CorruptCache(format!("unexpected format {:?}", header.format)));
    }
    if header.version != TABLE_VERSION {
        return Err(ReaderError::CorruptCache(format!("unsupported version {}", header.version)));
    }
    if header.class_labels != expected_vocab.labels() {
        return Err(ReaderError::VocabMismatch {
            table: header.class_labels,
            query: expected_vocab.labels().to_vec(),
        });
    }
    let mut table = ReaderScoreTable::new(header.reader, expected_vocab.clone());
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TableRow = serde_json::from_str(&line)
            .map_err(|e| ReaderError::CorruptCache(format!("line {}: {e}", n + 2)))?;
        let key = ScoreKey { query_id: row.query_id, record_id: row.record_id, query_image: row.query_image };
        table.insert(key, row.probs).map_err(|e| match e {
            ReaderError::DuplicateRow(k) => ReaderError::CorruptCache(format!("duplicate row {k}")),
            other => other,
        })?;
    }
    Ok(table)
}

/// Serves a stored table; misses are errors.
#[derive(Debug, Clone)]
pub struct CachedReader {
    table: ReaderScoreTable,
}

impl CachedReader {
    pub fn new(table: ReaderScoreTable) -> Self {
        Self { table }
    }

    pub fn load(path: impl AsRef<Path>, vocab: &ClassVocab) -> Result<Self, ReaderError> {
        Ok(Self::new(cache_load(path, vocab)?))
    }

    pub fn table(&self) -> &ReaderScoreTable {
        &self.table
    }
}

impl Reader for CachedReader {
    fn identity(&self) -> String {
        self.table.reader.clone()
    }

    fn read(&self, ctx: &ReadContext<'_>) -> Result<Vec<f64>, ReaderError> {
        if ctx.query.class_vocab != self.table.vocab {
            return Err(ReaderError::VocabMismatch {
                table: self.table.vocab.labels().to_vec(),
                query: ctx.query.class_vocab.labels().to_vec(),
            });
        }
        let key = ctx.key();
        self.table
            .get(&key)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| ReaderError::CacheMiss(key.to_string()))
    }
}

/// Write-through cache around another reader. Reads are concurrent; new
/// rows are appended under a single writer lock. Existing rows are never
/// modified.
pub struct MemoReader<R> {
    inner: R,
    table: RwLock<ReaderScoreTable>,
}

impl<R: Reader> MemoReader<R> {
    pub fn new(inner: R, vocab: ClassVocab) -> Self {
        let table = ReaderScoreTable::new(inner.identity(), vocab);
        Self { inner, table: RwLock::new(table) }
    }

    /// Start from previously stored rows (e.g. a cache file from an earlier run).
    pub fn with_table(inner: R, table: ReaderScoreTable) -> Self {
        Self { inner, table: RwLock::new(table) }
    }

    pub fn snapshot(&self) -> ReaderScoreTable {
        self.table.read().expect("table lock poisoned").clone()
    }

    pub fn into_table(self) -> ReaderScoreTable {
        self.table.into_inner().expect("table lock poisoned")
    }

    pub fn inner(&self) -> &R {
        &self.inner
    }
}

impl<R: Reader> Reader for MemoReader<R> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn read(&self, ctx: &ReadContext<'_>) -> Result<Vec<f64>, ReaderError> {
        let key = ctx.key();
        let same_vocab = {
            let table = self.table.read().expect("table lock poisoned");
            if let Some(p) = table.get(&key) {
                if ctx.query.class_vocab == table.vocab {
                    return Ok(p.to_vec());
                }
            }
            ctx.query.class_vocab == table.vocab
        };
        let probs = self.inner.read(ctx)?;
        if same_vocab {
            self.table.write().expect("table lock poisoned").insert(key, probs.clone())?;
        }
        Ok(probs)
    }

    fn supports_imageless(&self) -> bool {
        self.inner.supports_imageless()
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reader::{batch_score, SimulatedReader, SimulatedReaderParams};
    use crate::types::{Embedding, IndexRecord, Query, TaskKind};

    fn vocab(labels: &[&str]) -> ClassVocab {
        ClassVocab::new(labels.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn key(q: &str, r: u64) -> ScoreKey {
        ScoreKey { query_id: q.into(), record_id: Some(r), query_image: true }
    }

    fn sample() -> ReaderScoreTable {
        let mut t = ReaderScoreTable::new("test-reader", vocab(&["a", "b"]));
        t.insert(key("q1", 1), vec![0.25, 0.75]).unwrap();
        t.insert(key("q1", 2), vec![1.0, 0.0]).unwrap();
        t.insert(ScoreKey { query_id: "q2".into(), record_id: None, query_image: false }, vec![0.5, 0.5]).unwrap();
        t
    }

    #[test]
    fn store_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let t = sample();
        cache_store(&t, &path).unwrap();
        assert_eq!(cache_load(&path, &vocab(&["a", "b"])).unwrap(), t);
    }

    #[test]
    fn tampered_row_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        cache_store(&sample(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("[0.25,0.75]", "[0.45,0.75]");
        fs::write(&path, text).unwrap();
        assert!(matches!(cache_load(&path, &vocab(&["a", "b"])), Err(ReaderError::CorruptCache(_))));
    }

    #[test]
    fn vocab_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        cache_store(&sample(), &path).unwrap();
        assert!(matches!(cache_load(&path, &vocab(&["a", "b", "c"])), Err(ReaderError::VocabMismatch { .. })));
    }

    #[test]
    fn conflicting_rows_rejected() {
        let mut t = sample();
        assert!(t.insert(key("q1", 1), vec![0.25, 0.75]).is_ok());
        assert!(matches!(t.insert(key("q1", 1), vec![0.5, 0.5]), Err(ReaderError::DuplicateRow(_))));
    }

    fn fixture() -> (Vec<Query>, Vec<IndexRecord>) {
        let v = vocab(&["a", "b"]);
        let queries = (0..2)
            .map(|i| Query {
                query_id: format!("q{i}"),
                image_emb: Embedding::new(vec![0.0]).unwrap(),
                question: "?".into(),
                gold_answer: "a".into(),
                class_vocab: v.clone(),
                task_kind: TaskKind::Classification,
                payload_ref: "q#label=a&view=v0".into(),
            })
            .collect();
        let records = (0..2)
            .map(|i| IndexRecord {
                record_id: i,
                image_emb: Embedding::new(vec![0.0]).unwrap(),
                text_emb: Embedding::new(vec![0.0]).unwrap(),
                payload_ref: format!("r#label={}&view=v0", if i == 0 { "a" } else { "b" }),
                source_tag: "t".into(),
            })
            .collect();
        (queries, records)
    }

    #[test]
    fn batch_is_complete_and_deterministic() {
        let (queries, records) = fixture();
        let reader = SimulatedReader::new(SimulatedReaderParams::default()).unwrap();
        let pairs: Vec<_> = queries.iter().flat_map(|q| records.iter().map(move |r| (q, r))).collect();
        let a = batch_score(&reader, &pairs, &vocab(&["a", "b"]), 4);
        let b = batch_score(&reader, &pairs, &vocab(&["a", "b"]), 1);
        assert_eq!(a.table.len(), 4);
        assert!(a.errors.is_empty());
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn cached_reader_matches_source() {
        let (queries, records) = fixture();
        let reader = SimulatedReader::new(SimulatedReaderParams::default()).unwrap();
        let pairs: Vec<_> = queries.iter().flat_map(|q| records.iter().map(move |r| (q, r))).collect();
        let table = batch_score(&reader, &pairs, &vocab(&["a", "b"]), 2).table;
        let cached = CachedReader::new(table);
        for (q, r) in &pairs {
            let ctx = ReadContext::new(q, Some(r));
            assert_eq!(cached.read(&ctx).unwrap(), reader.read(&ctx).unwrap());
        }
        let ctx = ReadContext::new(&queries[0], None);
        assert!(matches!(cached.read(&ctx), Err(ReaderError::CacheMiss(_))));
    }

    #[test]
    fn memo_reader_records_misses_once() {
        let (queries, records) = fixture();
        let memo = MemoReader::new(SimulatedReader::new(SimulatedReaderParams::default()).unwrap(), vocab(&["a", "b"]));
        let ctx = ReadContext::new(&queries[0], Some(&records[1]));
        let first = memo.read(&ctx).unwrap();
        assert_eq!(memo.read(&ctx).unwrap(), first);
        assert_eq!(memo.snapshot().len(), 1);
    }
}
