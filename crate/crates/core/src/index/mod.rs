//! Exact dense retrieval over an in-memory index with two scoring heads.
//!
//! Scores are dot products between the raw query embedding and a projected
//! index embedding: `s = q · (W e + b)`. Projection heads start at identity
//! and are the only trainable part of the retriever.

mod io;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Candidate, CandidateSet, Embedding, HeadTag, IndexRecord, TypeError};

pub use io::{
    decode_heads, decode_index, encode_heads, encode_index, read_heads, read_index, write_heads, write_index, parse_corpus, read_corpus, write_corpus,
    INDEX_MAGIC, INDEX_VERSION, HEAD_MAGIC, HEAD_VERSION, CORPUS_HEADER,
};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k = {k} is outside 1..={size}")]
    InvalidK { k: usize, size: usize },
    #[error("projection head is for {found} but {expected} was requested")]
    HeadMismatch { expected: HeadTag, found: HeadTag },
    #[error("record ids must be strictly increasing ({prev} then {next})")]
    UnorderedIds { prev: u64, next: u64 },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("malformed corpus line {line}: {reason}")]
    MalformedCorpus { line: usize, reason: String },
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk element type for embeddings. Arithmetic always happens after widening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StorageDtype {
    #[default]
    F32,
    F16,
}

impl StorageDtype {
    pub fn tag(self) -> u8 {
        match self {
            StorageDtype::F32 => 0,
            StorageDtype::F16 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, IndexError> {
        match tag {
            0 => Ok(StorageDtype::F32),
            1 => Ok(StorageDtype::F16),
            other => Err(IndexError::UnknownDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    dim: usize,
    dtype: StorageDtype,
    records: Vec<IndexRecord>,
    positions: HashMap<u64, usize>,
}

impl Index {
    /// Build an index; record ids must be strictly increasing and all
    /// embeddings must share `dim`.
    pub fn new(dim: usize, dtype: StorageDtype, records: Vec<IndexRecord>) -> Result<Self, IndexError> {
        for r in &records {
            for e in [&r.image_emb, &r.text_emb] {
                if e.dim() != dim {
                    return Err(IndexError::DimensionMismatch { expected: dim, got: e.dim() });
                }
            }
        }
        for w in records.windows(2) {
            if w[0].record_id >= w[1].record_id {
                return Err(IndexError::UnorderedIds { prev: w[0].record_id, next: w[1].record_id });
            }
        }
        let positions = records.iter().enumerate().map(|(i, r)| (r.record_id, i)).collect();
        Ok(Self { dim, dtype, records, positions })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dtype(&self) -> StorageDtype {
        self.dtype
    }

    pub fn with_dtype(mut self, dtype: StorageDtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, record_id: u64) -> Option<&IndexRecord> {
        self.positions.get(&record_id).map(|&i| &self.records[i])
    }

    pub fn max_record_id(&self) -> Option<u64> {
        self.records.last().map(|r| r.record_id)
    }

    /// Append records with ids above the current maximum.
    pub fn extend(&mut self, records: Vec<IndexRecord>) -> Result<(), IndexError> {
        let mut all = std::mem::take(&mut self.records);
        all.extend(records);
        *self = Index::new(self.dim, self.dtype, all)?;
        Ok(())
    }

    /// L2-normalize every embedding so dot products become cosine similarities.
    pub fn normalized(&self) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| IndexRecord {
                image_emb: r.image_emb.normalized(),
                text_emb: r.text_emb.normalized(),
                ..r.clone()
            })
            .collect();
        Index { records, ..self.clone() }
    }
}

/// Trainable linear map applied to index embeddings: `x ↦ W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub head: HeadTag,
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProjectionHead {
    pub fn identity(head: HeadTag, dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self { head, dim, weight, bias: vec![0.0; dim] }
    }

    pub fn from_parts(head: HeadTag, dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self, IndexError> {
        if weight.len() != dim * dim {
            return Err(IndexError::DimensionMismatch { expected: dim * dim, got: weight.len() });
        }
        if bias.len() != dim {
            return Err(IndexError::DimensionMismatch { expected: dim, got: bias.len() });
        }
        if let Some(i) = weight.iter().chain(&bias).position(|v| !v.is_finite()) {
            return Err(TypeError::NonFinite(i).into());
        }
        Ok(Self { head, dim, weight, bias })
    }

    pub fn w(&self, row: usize, col: usize) -> f64 {
        self.weight[row * self.dim + col]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                let row = &self.weight[i * self.dim..(i + 1) * self.dim];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[i]
            })
            .collect()
    }

    /// Fold the projection into the query: returns `(Wᵀ q, q · b)` so that
    /// `score = (Wᵀ q) · e + q · b` costs one dot product per record.
    pub fn query_operator(&self, query: &[f64]) -> (Vec<f64>, f64) {
        let mut folded = vec![0.0; self.dim];
        for (i, &qi) in query.iter().enumerate() {
            let row = &self.weight[i * self.dim..(i + 1) * self.dim];
            for (f, w) in folded.iter_mut().zip(row) {
                *f += qi * w;
            }
        }
        let offset = query.iter().zip(&self.bias).map(|(q, b)| q * b).sum();
        (folded, offset)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// `q · (W e + b)` where `e` is the record embedding selected by `head`.
pub fn score(
    query_emb: &Embedding,
    record: &IndexRecord,
    head: HeadTag,
    proj: &ProjectionHead,
) -> Result<f64, IndexError> {
    if proj.head != head {
        return Err(IndexError::HeadMismatch { expected: head, found: proj.head });
    }
    let emb = record.embedding(head);
    for d in [query_emb.dim(), emb.dim()] {
        if d != proj.dim {
            return Err(IndexError::DimensionMismatch { expected: proj.dim, got: d });
        }
    }
    let projected = proj.apply(&emb.to_f64());
    Ok(query_emb.dot(&projected))
}

/// Score every record under one head.
pub fn score_all(
    query_emb: &Embedding,
    index: &Index,
    head: HeadTag,
    proj: &ProjectionHead,
) -> Result<Vec<f64>, IndexError> {
    if proj.head != head {
        return Err(IndexError::HeadMismatch { expected: head, found: proj.head });
    }
    if query_emb.dim() != index.dim() || proj.dim != index.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: index.dim(),
            got: if query_emb.dim() != index.dim() { query_emb.dim() } else { proj.dim },
        });
    }
    let (folded, offset) = proj.query_operator(&query_emb.to_f64());
    Ok(index
        .records()
        .iter()
        .map(|r| r.embedding(head).dot(&folded) + offset)
        .collect())
}

// Scores are finite, so partial_cmp is total here; it also equates 0.0 and -0.0.
fn canonical_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.raw_score
        .partial_cmp(&a.raw_score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.record_id.cmp(&b.record_id))
}

/// The `k` highest-scoring records, score descending with ties broken by
/// ascending record id.
pub fn top_k(
    query_id: &str,
    query_emb: &Embedding,
    index: &Index,
    head: HeadTag,
    proj: &ProjectionHead,
    k: usize,
) -> Result<CandidateSet, IndexError> {
    if index.is_empty() {
        return Err(IndexError::EmptyIndex);
    }
    if k == 0 || k > index.len() {
        return Err(IndexError::InvalidK { k, size: index.len() });
    }
    let scores = score_all(query_emb, index, head, proj)?;
    let mut all: Vec<Candidate> = index
        .records()
        .iter()
        .zip(scores)
        .map(|(r, s)| Candidate { record_id: r.record_id, head, raw_score: s })
        .collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, canonical_order);
        all.truncate(k);
    }
    all.sort_by(canonical_order);
    Ok(CandidateSet { query_id: query_id.to_owned(), candidates: all })
}

/// How the two heads' candidate lists become one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    /// Union, deduplicated by max score, re-sorted by raw score.
    #[default]
    UnionRerank,
    /// Alternate text/image entries, skipping records already taken.
    Interleave,
}

/// Merge two head-specific candidate lists. Duplicates keep their higher
/// raw score and the head that produced it.
pub fn merge_candidates(text: &CandidateSet, image: &CandidateSet, policy: MergePolicy) -> CandidateSet {
    let mut best: HashMap<u64, Candidate> = HashMap::new();
    for c in text.candidates.iter().chain(&image.candidates) {
        best.entry(c.record_id)
            .and_modify(|e| {
                if c.raw_score > e.raw_score {
                    *e = *c;
                }
            })
            .or_insert(*c);
    }
    let candidates = match policy {
        MergePolicy::UnionRerank => {
            let mut v: Vec<Candidate> = best.into_values().collect();
            v.sort_by(canonical_order);
            v
        }
        MergePolicy::Interleave => {
            let mut out = Vec::with_capacity(best.len());
            let n = text.len().max(image.len());
            for i in 0..n {
                for list in [&text.candidates, &image.candidates] {
                    if let Some(c) = list.get(i) {
                        if let Some(kept) = best.remove(&c.record_id) {
                            out.push(kept);
                        }
                    }
                }
            }
            out
        }
    };
    CandidateSet { query_id: text.query_id.clone(), candidates }
}

/// Retrieve with both heads and merge (at most `2 · k_per_head` entries).
pub fn dual_retrieve(
    query_id: &str,
    query_emb: &Embedding,
    index: &Index,
    text_proj: &ProjectionHead,
    image_proj: &ProjectionHead,
    k_per_head: usize,
    merge: MergePolicy,
) -> Result<CandidateSet, IndexError> {
    let text = top_k(query_id, query_emb, index, HeadTag::Text, text_proj, k_per_head)?;
    let image = top_k(query_id, query_emb, index, HeadTag::Image, image_proj, k_per_head)?;
    Ok(merge_candidates(&text, &image, merge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn rec(id: u64, img: &[f32], txt: &[f32]) -> IndexRecord {
        IndexRecord {
            record_id: id,
            image_emb: emb(img),
            text_emb: emb(txt),
            payload_ref: format!("r{id}"),
            source_tag: "test".into(),
        }
    }

    fn cand(id: u64, head: HeadTag, s: f64) -> Candidate {
        Candidate { record_id: id, head, raw_score: s }
    }

    #[test]
    fn score_examples() {
        let r = rec(1, &[0.0, 1.0], &[1.0, 0.0]);
        let q = emb(&[1.0, 0.0]);
        let t = ProjectionHead::identity(HeadTag::Text, 2);
        let i = ProjectionHead::identity(HeadTag::Image, 2);
        assert_eq!(score(&q, &r, HeadTag::Text, &t).unwrap(), 1.0);
        assert_eq!(score(&q, &r, HeadTag::Image, &i).unwrap(), 0.0);

        let r = rec(2, &[0.0, 0.0], &[3.0, 4.0]);
        let doubled = ProjectionHead::from_parts(HeadTag::Text, 2, vec![2.0, 0.0, 0.0, 2.0], vec![0.0; 2]).unwrap();
        assert_eq!(score(&emb(&[1.0, 2.0]), &r, HeadTag::Text, &doubled).unwrap(), 22.0);
    }

    #[test]
    fn score_rejects_mismatches() {
        let r = rec(1, &[0.0, 1.0], &[1.0, 0.0]);
        let t = ProjectionHead::identity(HeadTag::Text, 2);
        assert!(matches!(
            score(&emb(&[1.0, 0.0]), &r, HeadTag::Image, &t),
            Err(IndexError::HeadMismatch { .. })
        ));
        assert!(matches!(
            score(&emb(&[1.0, 0.0, 0.0]), &r, HeadTag::Text, &t),
            Err(IndexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn top_k_orders_and_breaks_ties() {
        let idx = Index::new(
            1,
            StorageDtype::F32,
            vec![rec(1, &[0.9], &[0.9]), rec(2, &[0.5], &[0.5]), rec(3, &[0.1], &[0.1])],
        )
        .unwrap();
        let head = ProjectionHead::identity(HeadTag::Image, 1);
        let got = top_k("q", &emb(&[1.0]), &idx, HeadTag::Image, &head, 2).unwrap();
        assert_eq!(got.record_ids(), vec![1, 2]);

        let flat = Index::new(
            1,
            StorageDtype::F32,
            vec![rec(4, &[1.0], &[1.0]), rec(7, &[1.0], &[1.0]), rec(9, &[1.0], &[1.0])],
        )
        .unwrap();
        let got = top_k("q", &emb(&[1.0]), &flat, HeadTag::Image, &head, 2).unwrap();
        assert_eq!(got.record_ids(), vec![4, 7]);
    }

    #[test]
    fn top_k_errors() {
        let empty = Index::new(1, StorageDtype::F32, vec![]).unwrap();
        let head = ProjectionHead::identity(HeadTag::Image, 1);
        assert!(matches!(
            top_k("q", &emb(&[1.0]), &empty, HeadTag::Image, &head, 1),
            Err(IndexError::EmptyIndex)
        ));
        let one = Index::new(1, StorageDtype::F32, vec![rec(1, &[1.0], &[1.0])]).unwrap();
        assert!(matches!(
            top_k("q", &emb(&[1.0]), &one, HeadTag::Image, &head, 2),
            Err(IndexError::InvalidK { .. })
        ));
    }

    #[test]
    fn index_rejects_unordered_ids() {
        let r = Index::new(1, StorageDtype::F32, vec![rec(2, &[1.0], &[1.0]), rec(1, &[1.0], &[1.0])]);
        assert!(matches!(r, Err(IndexError::UnorderedIds { .. })));
    }

    #[test]
    fn merge_union_disjoint_and_dedup() {
        let t = CandidateSet { query_id: "q".into(), candidates: vec![cand(1, HeadTag::Text, 0.9), cand(2, HeadTag::Text, 0.4)] };
        let i = CandidateSet { query_id: "q".into(), candidates: vec![cand(3, HeadTag::Image, 0.7), cand(4, HeadTag::Image, 0.2)] };
        let m = merge_candidates(&t, &i, MergePolicy::UnionRerank);
        assert_eq!(m.record_ids(), vec![1, 3, 2, 4]);
        assert!(m.is_canonically_ordered());

        let t = CandidateSet { query_id: "q".into(), candidates: vec![cand(1, HeadTag::Text, 0.3)] };
        let i = CandidateSet { query_id: "q".into(), candidates: vec![cand(1, HeadTag::Image, 0.8)] };
        let m = merge_candidates(&t, &i, MergePolicy::UnionRerank);
        assert_eq!(m.candidates, vec![cand(1, HeadTag::Image, 0.8)]);
    }

    #[test]
    fn merge_interleave_hand_trace() {
        // A=1, B=2, C=3: text [A, B], image [C, A] -> [A, C, B]
        let t = CandidateSet { query_id: "q".into(), candidates: vec![cand(1, HeadTag::Text, 0.9), cand(2, HeadTag::Text, 0.5)] };
        let i = CandidateSet { query_id: "q".into(), candidates: vec![cand(3, HeadTag::Image, 0.8), cand(1, HeadTag::Image, 0.6)] };
        let m = merge_candidates(&t, &i, MergePolicy::Interleave);
        assert_eq!(m.record_ids(), vec![1, 3, 2]);
        assert_eq!(m.candidates[0].raw_score, 0.9);
    }

    fn arb_index() -> impl Strategy<Value = (Index, Embedding)> {
        (1usize..6, 1usize..40).prop_flat_map(|(dim, n)| {
            (
                prop::collection::vec(prop::collection::vec(-3i8..4, dim), n),
                prop::collection::vec(-3i8..4, dim),
            )
                .prop_map(move |(rows, q)| {
                    // small integer grid forces plenty of ties
                    let records = rows
                        .iter()
                        .enumerate()
                        .map(|(i, r)| {
                            let v: Vec<f32> = r.iter().map(|&x| f32::from(x)).collect();
                            rec(i as u64 * 3, &v, &v)
                        })
                        .collect();
                    let q: Vec<f32> = q.iter().map(|&x| f32::from(x)).collect();
                    (Index::new(dim, StorageDtype::F32, records).unwrap(), emb(&q))
                })
        })
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort((index, q) in arb_index(), k_frac in 0.0f64..1.0) {
            let k = 1 + ((index.len() - 1) as f64 * k_frac) as usize;
            let head = ProjectionHead::identity(HeadTag::Image, index.dim());
            let got = top_k("q", &q, &index, HeadTag::Image, &head, k).unwrap();
            let mut all: Vec<(f64, u64)> = index
                .records()
                .iter()
                .map(|r| (r.image_emb.dot(&q.to_f64()), r.record_id))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: Vec<u64> = all.iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(got.record_ids(), expected);
            prop_assert!(got.is_canonically_ordered());
        }

        #[test]
        fn score_is_linear_in_weights(
            w1 in prop::collection::vec(-2.0f64..2.0, 9),
            w2 in prop::collection::vec(-2.0f64..2.0, 9),
            e in prop::collection::vec(-2.0f32..2.0, 3),
            q in prop::collection::vec(-2.0f32..2.0, 3),
        ) {
            let r = rec(0, &e, &e);
            let q = emb(&q);
            let mk = |w: Vec<f64>| ProjectionHead::from_parts(HeadTag::Text, 3, w, vec![0.0; 3]).unwrap();
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let s1 = score(&q, &r, HeadTag::Text, &mk(w1)).unwrap();
            let s2 = score(&q, &r, HeadTag::Text, &mk(w2)).unwrap();
            let s12 = score(&q, &r, HeadTag::Text, &mk(sum)).unwrap();
            prop_assert!((s12 - (s1 + s2)).abs() < 1e-9);
        }
    }
}
