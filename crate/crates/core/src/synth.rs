//! Seeded synthetic corpus and query generator.
//!
//! Each embedding is `[semantic part | view part] + noise`. The semantic part
//! is the center of the record's label; the view part is the center of the
//! class whose images it resembles. Informative records show their own
//! class's view, distractors show another class's view, neutral records have
//! no view signal. Queries show their own class on both parts. Text
//! embeddings are noisy copies of the image embeddings (correlation `rho`).

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ExternalChoices;
use crate::fusion::FusedPrediction;
use crate::index::{dual_retrieve, top_k, Index, IndexError, MergePolicy, ProjectionHead, StorageDtype};
use crate::noise::keyed_normal;
use crate::types::{ClassVocab, Embedding, HeadTag, IndexRecord, Query, TaskKind, TypeError};

pub const SOURCE_TAG: &str = "synth";
pub const INJECTED_TAG: &str = "injected";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("cannot reach inconsistency rate {rate}: {reason}")]
    InfeasibleRate { rate: f64, reason: String },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub records_per_class: usize,
    /// Evaluation queries per class.
    pub queries_per_class: usize,
    /// Training queries per class, drawn separately from the evaluation set.
    pub train_queries_per_class: usize,
    /// Norm of each label's semantic center.
    pub semantic_separation: f64,
    /// Norm of each class's view center.
    pub view_separation: f64,
    /// Total noise norm scale; each coordinate gets `sigma_within / sqrt(dim)`.
    pub sigma_within: f64,
    pub informative_fraction: f64,
    pub distractor_fraction: f64,
    /// Correlation between a record's text and image embeddings.
    pub text_correlation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 32,
            records_per_class: 50,
            queries_per_class: 50,
            train_queries_per_class: 50,
            semantic_separation: 1.0,
            view_separation: 2.0,
            sigma_within: 3.0,
            informative_fraction: 0.4,
            distractor_fraction: 0.2,
            text_correlation: 0.8,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.dim < 2 {
            return bad("dimension must be at least 2");
        }
        if self.records_per_class == 0 || self.queries_per_class == 0 || self.train_queries_per_class == 0 {
            return bad("counts must be at least 1");
        }
        for (name, v) in [
            ("informative_fraction", self.informative_fraction),
            ("distractor_fraction", self.distractor_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidSpec(format!("{name} must be in [0, 1]")));
            }
        }
        if self.informative_fraction + self.distractor_fraction > 1.0 + 1e-12 {
            return bad("informative and distractor fractions exceed 1");
        }
        if !(-1.0..=1.0).contains(&self.text_correlation) {
            return bad("text_correlation must be in [-1, 1]");
        }
        for v in [self.semantic_separation, self.view_separation, self.sigma_within] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("scales must be finite and non-negative");
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> ClassVocab {
        ClassVocab::new((0..self.classes).map(class_label).collect()).expect("distinct labels")
    }

    fn semantic_dims(&self) -> usize {
        self.dim / 2
    }
}

pub fn class_label(c: usize) -> String {
    format!("c{c}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Informative,
    Distractor,
    Neutral,
    /// Planted by [`inject_inconsistency`]: the query's view, another label.
    Injected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordTag {
    pub record_id: u64,
    pub label: usize,
    /// Class whose view the image shows, if any.
    pub view: Option<usize>,
    pub kind: RecordKind,
}

/// Cluster centers, needed to place injected records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centers {
    pub semantic: Vec<Vec<f64>>,
    pub view: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub index: Index,
    pub train_queries: Vec<Query>,
    pub eval_queries: Vec<Query>,
    pub tags: Vec<RecordTag>,
    pub centers: Centers,
}

pub const TAGS_FORMAT: &str = "ragdistill-tags";
pub const TAGS_VERSION: u32 = 1;

/// JSONL: a header line, then one tag per record.
pub fn write_tags<W: std::io::Write>(tags: &[RecordTag], mut out: W) -> std::io::Result<()> {
    let header = serde_json::json!({ "format": TAGS_FORMAT, "version": TAGS_VERSION });
    writeln!(out, "{header}")?;
    for t in tags {
        writeln!(out, "{}", serde_json::to_string(t).expect("tag serializes"))?;
    }
    Ok(())
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize, norm: f64) -> Vec<f64> {
    let v = normal_vec(rng, n, 1.0);
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / len * norm).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn record_payload(id: u64, label: usize, view: Option<usize>) -> String {
    let view = view.map(class_label).unwrap_or_else(|| "none".into());
    format!("synth://record/{id}#label={}&view={view}", class_label(label))
}

/// Deterministic corpus and query sets for `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, d, h) = (spec.classes, spec.dim, spec.semantic_dims());
    let semantic: Vec<Vec<f64>> = (0..c).map(|_| unit_vec(&mut rng, h, spec.semantic_separation)).collect();
    let view: Vec<Vec<f64>> = (0..c).map(|_| unit_vec(&mut rng, d - h, spec.view_separation)).collect();
    let noise_scale = spec.sigma_within / (d as f64).sqrt();
    let rho = spec.text_correlation;
    let text_noise = (1.0 - rho * rho).max(0.0).sqrt();

    let mut records = Vec::with_capacity(c * spec.records_per_class);
    let mut tags = Vec::with_capacity(records.capacity());
    for label in 0..c {
        for _ in 0..spec.records_per_class {
            let id = records.len() as u64;
            let u: f64 = rng.gen();
            let (kind, v) = if u < spec.informative_fraction {
                (RecordKind::Informative, Some(label))
            } else if u < spec.informative_fraction + spec.distractor_fraction {
                (RecordKind::Distractor, Some((label + 1 + rng.gen_range(0..c - 1)) % c))
            } else {
                (RecordKind::Neutral, None)
            };
            let center: Vec<f64> = semantic[label]
                .iter()
                .chain(v.map(|v| &view[v]).unwrap_or(&vec![0.0; d - h]))
                .copied()
                .collect();
            let image = add(&center, &normal_vec(&mut rng, d, noise_scale));
            let text: Vec<f64> = image
                .iter()
                .zip(normal_vec(&mut rng, d, noise_scale))
                .map(|(i, n)| rho * i + text_noise * n)
                .collect();
            records.push(IndexRecord {
                record_id: id,
                image_emb: Embedding::from_f64(&image)?,
                text_emb: Embedding::from_f64(&text)?,
                payload_ref: record_payload(id, label, v),
                source_tag: SOURCE_TAG.into(),
            });
            tags.push(RecordTag { record_id: id, label, view: v, kind });
        }
    }
    let vocab = spec.vocab();
    let mut make_queries = |split: &str, per_class: usize| -> Result<Vec<Query>, SynthError> {
        let mut out = Vec::with_capacity(c * per_class);
        for label in 0..c {
            let center: Vec<f64> = semantic[label].iter().chain(&view[label]).copied().collect();
            for _ in 0..per_class {
                let i = out.len();
                let emb = add(&center, &normal_vec(&mut rng, d, noise_scale));
                let name = class_label(label);
                out.push(Query {
                    query_id: format!("{split}-{i:04}"),
                    image_emb: Embedding::from_f64(&emb)?,
                    question: "Which class does this image show?".into(),
                    gold_answer: name.clone(),
                    class_vocab: vocab.clone(),
                    task_kind: TaskKind::Classification,
                    payload_ref: format!("synth://query/{split}/{i}#label={name}&view={name}"),
                });
            }
        }
        Ok(out)
    };
    let train_queries = make_queries("train", spec.train_queries_per_class)?;
    let eval_queries = make_queries("eval", spec.queries_per_class)?;
    Ok(SynthCorpus {
        spec: spec.clone(),
        index: Index::new(d, StorageDtype::F32, records)?,
        train_queries,
        eval_queries,
        tags,
        centers: Centers { semantic, view },
    })
}

/// Mean fraction of each query's top-k under `proj` that is informative for
/// it: same label as the gold answer and same view as the query image.
pub fn informative_recall_at_k(
    index: &Index,
    queries: &[Query],
    proj: &ProjectionHead,
    k: usize,
) -> Result<f64, IndexError> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for q in queries {
        let set = top_k(&q.query_id, &q.image_emb, index, proj.head, proj, k)?;
        let hits = set
            .candidates
            .iter()
            .filter(|c| {
                index.get(c.record_id).is_some_and(|r| {
                    r.label() == Some(q.gold_answer.as_str()) && r.view().is_some() && r.view() == q.view()
                })
            })
            .count();
        total += hits as f64 / set.len() as f64;
    }
    Ok(total / queries.len() as f64)
}

/// Whether the labels of a query's top-k (dual retrieval) differ.
pub fn label_mixed(
    index: &Index,
    query: &Query,
    heads: (&ProjectionHead, &ProjectionHead),
    k: usize,
    merge: MergePolicy,
) -> Result<bool, IndexError> {
    let mut set = dual_retrieve(&query.query_id, &query.image_emb, index, heads.0, heads.1, k, merge)?;
    set.truncate(k);
    let labels: BTreeSet<Option<&str>> =
        set.candidates.iter().map(|c| index.get(c.record_id).and_then(|r| r.label())).collect();
    Ok(labels.len() > 1)
}

/// Proportion of `queries` whose top-k labels are mixed.
pub fn label_mixed_proportion(
    index: &Index,
    queries: &[Query],
    heads: (&ProjectionHead, &ProjectionHead),
    k: usize,
    merge: MergePolicy,
) -> Result<f64, IndexError> {
    let mut mixed = 0;
    for q in queries {
        if label_mixed(index, q, heads, k, merge)? {
            mixed += 1;
        }
    }
    Ok(mixed as f64 / queries.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub index: Index,
    pub injected: Vec<u64>,
    pub tags: Vec<RecordTag>,
    /// Queries that received a planted record.
    pub targeted: Vec<String>,
    /// Label-mixed proportion after injection, under identity heads.
    pub mixed_proportion: f64,
}

const INJECTION_MARGIN: f64 = 0.1;
const INJECTION_ROUNDS: usize = 4;

/// Plant records so that `round(rate · N)` queries have label-mixed top-k
/// under identity heads. Queries already mixed count toward the target.
/// Each planted record carries the query's view and a label different from
/// the one currently retrieved, scored just above the current top-1.
pub fn inject_inconsistency(
    corpus: &SynthCorpus,
    index: &Index,
    queries: &[Query],
    rate: f64,
    k: usize,
) -> Result<Injection, SynthError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(SynthError::InfeasibleRate { rate, reason: "rate must be in [0, 1]".into() });
    }
    let merge = MergePolicy::UnionRerank;
    let d = index.dim();
    let text = ProjectionHead::identity(HeadTag::Text, d);
    let image = ProjectionHead::identity(HeadTag::Image, d);
    let heads = (&text, &image);
    if k < 2 || index.len() < k {
        return Err(SynthError::InfeasibleRate { rate, reason: format!("top-{k} over {} records", index.len()) });
    }
    let target = (rate * queries.len() as f64).round() as usize;
    let vocab = corpus.spec.vocab();
    let h = corpus.spec.semantic_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.spec.seed.wrapping_add(1));
    let mut index = index.clone();
    let mut injected = Vec::new();
    let mut tags = Vec::new();
    let mut targeted = Vec::new();

    for _ in 0..INJECTION_ROUNDS {
        let mut mixed = Vec::with_capacity(queries.len());
        for q in queries {
            mixed.push(label_mixed(&index, q, heads, k, merge)?);
        }
        let have = mixed.iter().filter(|m| **m).count();
        if have >= target {
            let mixed_proportion = have as f64 / queries.len().max(1) as f64;
            return Ok(Injection { index, injected, tags, targeted, mixed_proportion });
        }
        let mut consistent: Vec<usize> = (0..queries.len()).filter(|&i| !mixed[i]).collect();
        shuffle(&mut consistent, &mut rng);
        let mut next_id = index.max_record_id().map_or(0, |m| m + 1);
        let mut planted = Vec::new();
        for &qi in consistent.iter().take(target - have) {
            let q = &queries[qi];
            let Some(y) = vocab.index_of(q.image_label()) else {
                continue;
            };
            let mut set = dual_retrieve(&q.query_id, &q.image_emb, &index, &text, &image, k, merge)?;
            set.truncate(k);
            let top = &set.candidates[0];
            let current = index.get(top.record_id).and_then(|r| r.label()).and_then(|l| vocab.index_of(l));
            let w = if current == Some(y) {
                (y + 1 + rng.gen_range(0..vocab.len() - 1)) % vocab.len()
            } else {
                y
            };
            let qv = q.image_emb.to_f64();
            let (q_sem, q_view) = qv.split_at(h);
            let m_y = &corpus.centers.view[y];
            let want = top.raw_score + INJECTION_MARGIN * top.raw_score.abs().max(1e-3);
            let base = dot(&corpus.centers.semantic[w], q_sem) + dot(m_y, q_view);
            let dir: Vec<f64> = q_view.iter().zip(m_y).map(|(a, b)| a - b).collect();
            let gain = dot(&dir, q_view);
            let view_part: Vec<f64> = if gain > 1e-6 {
                let lambda = ((want - base) / gain).max(0.0);
                m_y.iter().zip(&dir).map(|(m, t)| m + lambda * t).collect()
            } else {
                let qq = dot(q_view, q_view).max(1e-12);
                let lambda = ((want - dot(&corpus.centers.semantic[w], q_sem)) / qq).max(0.0);
                q_view.iter().map(|t| lambda * t).collect()
            };
            let emb: Vec<f64> = corpus.centers.semantic[w].iter().chain(&view_part).copied().collect();
            let e = Embedding::from_f64(&emb)?;
            planted.push(IndexRecord {
                record_id: next_id,
                image_emb: e.clone(),
                text_emb: e,
                payload_ref: format!(
                    "synth://injected/{next_id}#label={}&view={}",
                    class_label(w),
                    class_label(y)
                ),
                source_tag: INJECTED_TAG.into(),
            });
            injected.push(next_id);
            tags.push(RecordTag { record_id: next_id, label: w, view: Some(y), kind: RecordKind::Injected });
            targeted.push(q.query_id.clone());
            next_id += 1;
        }
        if planted.is_empty() {
            break;
        }
        index.extend(planted)?;
    }
    let have = label_mixed_proportion(&index, queries, heads, k, merge)?;
    if (have * queries.len() as f64).round() as usize >= target {
        return Ok(Injection { index, injected, tags, targeted, mixed_proportion: have });
    }
    Err(SynthError::InfeasibleRate { rate, reason: format!("reached {have:.3} after {INJECTION_ROUNDS} rounds") })
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Stand-in for an external reranker: with probability `skill` it picks
/// the best-scored candidate whose image shares the query's view, otherwise
/// (or when none does) a uniformly random candidate. Draws are keyed by
/// `(seed, query_id)`.
pub fn simulated_choices(
    predictions: &[FusedPrediction],
    index: &Index,
    queries: &[Query],
    skill: f64,
    seed: u64,
) -> ExternalChoices {
    let views: std::collections::HashMap<&str, Option<&str>> =
        queries.iter().map(|q| (q.query_id.as_str(), q.view())).collect();
    let mut out = ExternalChoices { name: format!("simulated(skill={skill},seed={seed})"), ..Default::default() };
    for p in predictions {
        if p.record_ids.is_empty() {
            continue;
        }
        let qview = views.get(p.query_id.as_str()).copied().flatten();
        let on_view = p
            .record_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| qview.is_some() && index.get(**id).and_then(|r| r.view()) == qview)
            .map(|(i, _)| i)
            .max_by(|a, b| p.raw_scores[*a].partial_cmp(&p.raw_scores[*b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(a)));
        let u1 = uniform(seed, &p.query_id, 0);
        let choice = match on_view {
            Some(i) if u1 < skill => i,
            _ => ((uniform(seed, &p.query_id, 1) * p.record_ids.len() as f64) as usize).min(p.record_ids.len() - 1),
        };
        out.choices.insert(p.query_id.clone(), choice);
    }
    out
}

/// Uniform in (0, 1) from the keyed normal via its CDF.
fn uniform(seed: u64, key: &str, slot: u64) -> f64 {
    let z = keyed_normal(seed, key, slot);
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Abramowitz–Stegun 7.1.26 (|error| < 1.5e-7); ample for a coin flip.
fn erf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let y = 1.0
        - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t + 0.254_829_592)
            * t
            * (-x * x).exp();
    y.copysign(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::encode_index;

    fn small() -> SynthSpec {
        SynthSpec { records_per_class: 20, queries_per_class: 10, train_queries_per_class: 5, ..Default::default() }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(encode_index(&a.index), encode_index(&b.index));
        assert_eq!(a.eval_queries, b.eval_queries);
        let c = generate(&SynthSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(encode_index(&a.index), encode_index(&c.index));
    }

    #[test]
    fn tags_are_consistent_with_payloads() {
        let corpus = generate(&small()).unwrap();
        for (tag, r) in corpus.tags.iter().zip(corpus.index.records()) {
            assert_eq!(r.label(), Some(class_label(tag.label).as_str()));
            match tag.kind {
                RecordKind::Informative => assert_eq!(tag.view, Some(tag.label)),
                RecordKind::Distractor => assert_ne!(tag.view, Some(tag.label)),
                RecordKind::Neutral => assert_eq!(tag.view, None),
                RecordKind::Injected => unreachable!(),
            }
        }
        let golds: Vec<&str> = corpus.eval_queries.iter().map(|q| q.gold_answer.as_str()).collect();
        for c in 0..4 {
            assert_eq!(golds.iter().filter(|g| **g == class_label(c)).count(), 10);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec { informative_fraction: 0.9, ..small() }).is_err());
        assert!(generate(&SynthSpec { classes: 1, ..small() }).is_err());
    }

    #[test]
    fn zero_rate_leaves_corpus_unchanged() {
        let corpus = generate(&small()).unwrap();
        let inj = inject_inconsistency(&corpus, &corpus.index, &corpus.eval_queries, 0.0, 4).unwrap();
        assert_eq!(inj.index, corpus.index);
        assert!(inj.injected.is_empty());
    }

    #[test]
    fn full_rate_mixes_labels() {
        let corpus = generate(&small()).unwrap();
        let inj = inject_inconsistency(&corpus, &corpus.index, &corpus.eval_queries, 1.0, 4).unwrap();
        assert!(inj.mixed_proportion >= 0.9, "{}", inj.mixed_proportion);
    }

    #[test]
    fn erf_reference_points() {
        assert!((erf(0.0)).abs() < 1e-9);
        assert!((erf(1.0) - 0.842_700_79).abs() < 2e-7);
        assert!((erf(-2.0) + 0.995_322_27).abs() < 2e-7);
    }
}
