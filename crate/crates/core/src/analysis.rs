//! Consistency splits, oracle evaluation, reranker comparison and report
//! emission over prediction dumps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusedPrediction, FusionError, InferenceMode, Reranker};
use crate::metrics::{metrics, MetricError, MetricReport};
use crate::types::TaskKind;

pub const CHOICES_FORMAT: &str = "ragdistill-choices";
pub const CHOICES_VERSION: u32 = 1;
pub const SUMMARY_FORMAT: &str = "ragdistill-summary";
pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("query {0} has no candidate labels")]
    MissingCandidates(String),
    #[error("oracle evaluation is undefined for open questions (query {0})")]
    UnsupportedTask(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("malformed choices file: {0}")]
    MalformedChoices(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    Consistent,
    Inconsistent,
}

impl Consistency {
    pub fn as_str(self) -> &'static str {
        match self {
            Consistency::Consistent => "consistent",
            Consistency::Inconsistent => "inconsistent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub tag: Consistency,
    pub candidate_labels: Vec<String>,
}

/// Query id → consistency tag with the labels that justified it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencySplit {
    pub entries: BTreeMap<String, SplitEntry>,
}

impl ConsistencySplit {
    pub fn tag(&self, query_id: &str) -> Option<Consistency> {
        self.entries.get(query_id).map(|e| e.tag)
    }

    pub fn count(&self, tag: Consistency) -> usize {
        self.entries.values().filter(|e| e.tag == tag).count()
    }

    pub fn inconsistent_proportion(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.count(Consistency::Inconsistent) as f64 / self.entries.len() as f64
        }
    }
}

/// A query is inconsistent when its candidates' labels are not all equal.
pub fn split_consistency(predictions: &[FusedPrediction]) -> Result<ConsistencySplit, AnalysisError> {
    let mut split = ConsistencySplit::default();
    for p in predictions {
        let Some(first) = p.candidate_labels.first() else {
            return Err(AnalysisError::MissingCandidates(p.query_id.clone()));
        };
        let tag = if p.candidate_labels.iter().all(|l| l == first) {
            Consistency::Consistent
        } else {
            Consistency::Inconsistent
        };
        split.entries.insert(p.query_id.clone(), SplitEntry { tag, candidate_labels: p.candidate_labels.clone() });
    }
    Ok(split)
}

/// Labels the oracle may select from: every candidate's label, the fused
/// label and the mean-confidence label.
pub fn oracle_answer_set(p: &FusedPrediction) -> BTreeSet<&str> {
    let mut set: BTreeSet<&str> = p.candidate_labels.iter().map(String::as_str).collect();
    set.insert(p.fused_label());
    set.insert(p.mean_confidence_label());
    set
}

/// Gold when the answer set contains it, otherwise the fused label.
pub fn oracle_label(p: &FusedPrediction) -> &str {
    if oracle_answer_set(p).contains(p.gold.as_str()) {
        &p.gold
    } else {
        p.fused_label()
    }
}

fn report(labels: &[&str], gold: &[&str], task: TaskKind) -> Result<MetricReport, AnalysisError> {
    Ok(metrics(labels, gold, task)?)
}

fn task_of(predictions: &[FusedPrediction]) -> TaskKind {
    if predictions.iter().any(|p| p.task_kind == TaskKind::VqaClosed) {
        TaskKind::VqaClosed
    } else {
        predictions.first().map(|p| p.task_kind).unwrap_or(TaskKind::Classification)
    }
}

pub fn oracle_eval(predictions: &[FusedPrediction]) -> Result<MetricReport, AnalysisError> {
    if let Some(open) = predictions.iter().find(|p| p.task_kind == TaskKind::VqaOpen) {
        return Err(AnalysisError::UnsupportedTask(open.query_id.clone()));
    }
    let labels: Vec<&str> = predictions.iter().map(oracle_label).collect();
    let gold: Vec<&str> = predictions.iter().map(|p| p.gold.as_str()).collect();
    report(&labels, &gold, task_of(predictions))
}

/// Metrics of the labels as stored in the dump.
pub fn dump_eval(predictions: &[FusedPrediction]) -> Result<MetricReport, AnalysisError> {
    let labels: Vec<&str> = predictions.iter().map(|p| p.predicted.as_str()).collect();
    let gold: Vec<&str> = predictions.iter().map(|p| p.gold.as_str()).collect();
    report(&labels, &gold, task_of(predictions))
}

/// Metrics after re-deriving every label under `mode`.
pub fn mode_eval(
    predictions: &[FusedPrediction],
    mode: InferenceMode,
    reranker: Option<&dyn Reranker>,
) -> Result<MetricReport, AnalysisError> {
    let derived = predictions
        .iter()
        .map(|p| p.with_mode(mode, reranker))
        .collect::<Result<Vec<_>, _>>()?;
    dump_eval(&derived)
}

pub fn rerank_eval(predictions: &[FusedPrediction], reranker: &dyn Reranker) -> Result<MetricReport, AnalysisError> {
    mode_eval(predictions, InferenceMode::Reranked, Some(reranker))
}

/// Follows the highest-similarity candidate.
pub struct Top1Similarity;

impl Reranker for Top1Similarity {
    fn name(&self) -> String {
        "top1_similarity".into()
    }
    fn choose(&self, p: &FusedPrediction) -> Result<usize, FusionError> {
        let peak = p.raw_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        p.raw_scores
            .iter()
            .position(|s| *s == peak)
            .ok_or(FusionError::EmptyCandidates)
    }
}

/// Follows the candidate whose reader distribution has the largest peak.
pub struct TopLogit;

impl Reranker for TopLogit {
    fn name(&self) -> String {
        "top_logit".into()
    }
    fn choose(&self, p: &FusedPrediction) -> Result<usize, FusionError> {
        p.max_confidence_candidate().ok_or(FusionError::EmptyCandidates)
    }
}

/// Choices made elsewhere (e.g. by a separate model), one per query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalChoices {
    pub name: String,
    pub choices: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ChoicesHeader {
    format: String,
    version: u32,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct ChoiceRow {
    query_id: String,
    choice: usize,
}

impl ExternalChoices {
    pub fn read<R: BufRead>(input: R) -> Result<Self, AnalysisError> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| AnalysisError::MalformedChoices("empty file".into()))??;
        let header: ChoicesHeader =
            serde_json::from_str(&header).map_err(|e| AnalysisError::MalformedChoices(format!("header: {e}")))?;
        if header.format != CHOICES_FORMAT || header.version != CHOICES_VERSION {
            return Err(AnalysisError::MalformedChoices(format!("unsupported {} v{}", header.format, header.version)));
        }
        let mut choices = HashMap::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ChoiceRow = serde_json::from_str(&line)
                .map_err(|e| AnalysisError::MalformedChoices(format!("line {}: {e}", n + 2)))?;
            if choices.insert(row.query_id.clone(), row.choice).is_some() {
                return Err(AnalysisError::MalformedChoices(format!("duplicate query {}", row.query_id)));
            }
        }
        Ok(Self { name: header.name, choices })
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = ChoicesHeader { format: CHOICES_FORMAT.into(), version: CHOICES_VERSION, name: self.name.clone() };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        let ordered: BTreeMap<&String, &usize> = self.choices.iter().collect();
        for (query_id, choice) in ordered {
            let row = ChoiceRow { query_id: query_id.clone(), choice: *choice };
            writeln!(out, "{}", serde_json::to_string(&row).expect("row serializes"))?;
        }
        Ok(())
    }
}

impl Reranker for ExternalChoices {
    fn name(&self) -> String {
        format!("external:{}", self.name)
    }
    fn choose(&self, p: &FusedPrediction) -> Result<usize, FusionError> {
        self.choices
            .get(&p.query_id)
            .copied()
            .ok_or_else(|| FusionError::UnsupportedMode {
                mode: InferenceMode::Reranked,
                reason: format!("no external choice for query {}", p.query_id),
            })
    }
}

/// Splits × rows × metrics. Splits are `all`, `consistent`, `inconsistent`
/// (empty splits are omitted); rows are modes, rerankers and the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub version: u32,
    pub n_queries: usize,
    pub inconsistent_proportion: f64,
    pub splits: BTreeMap<String, BTreeMap<String, MetricReport>>,
}

fn subset(preds: &[FusedPrediction], ids: &BTreeSet<&str>) -> Vec<FusedPrediction> {
    preds.iter().filter(|p| ids.contains(p.query_id.as_str())).cloned().collect()
}

fn split_ids(split: &ConsistencySplit) -> Vec<(String, BTreeSet<&str>)> {
    let mut out = vec![("all".to_string(), split.entries.keys().map(String::as_str).collect())];
    for tag in [Consistency::Consistent, Consistency::Inconsistent] {
        let ids: BTreeSet<&str> =
            split.entries.iter().filter(|(_, e)| e.tag == tag).map(|(k, _)| k.as_str()).collect();
        if !ids.is_empty() {
            out.push((tag.as_str().to_string(), ids));
        }
    }
    out
}

/// Build the summary from a fused-mode dump. `extra` holds dumps produced
/// by other modes; each is evaluated on the fused dump's splits.
pub fn summarize(
    fused: &[FusedPrediction],
    rerankers: &[&dyn Reranker],
    extra: &[(String, Vec<FusedPrediction>)],
) -> Result<Summary, AnalysisError> {
    let closed: Vec<FusedPrediction> = fused.iter().filter(|p| p.task_kind.is_closed_set()).cloned().collect();
    let split = split_consistency(&closed)?;
    let mut splits = BTreeMap::new();
    for (name, ids) in split_ids(&split) {
        let preds = subset(&closed, &ids);
        let mut rows = BTreeMap::new();
        for mode in [
            InferenceMode::Fused,
            InferenceMode::Top1,
            InferenceMode::MaxConfidence,
            InferenceMode::MeanConfidence,
        ] {
            rows.insert(mode.as_str().to_string(), mode_eval(&preds, mode, None)?);
        }
        for r in rerankers {
            rows.insert(format!("rerank:{}", r.name()), rerank_eval(&preds, *r)?);
        }
        rows.insert("oracle".to_string(), oracle_eval(&preds)?);
        for (label, dump) in extra {
            let sub = subset(dump, &ids);
            if !sub.is_empty() {
                rows.insert(label.clone(), dump_eval(&sub)?);
            }
        }
        splits.insert(name, rows);
    }
    Ok(Summary {
        format: SUMMARY_FORMAT.into(),
        version: SUMMARY_VERSION,
        n_queries: closed.len(),
        inconsistent_proportion: split.inconsistent_proportion(),
        splits,
    })
}

/// Aligned plain-text rendering: one block per split, one line per row.
pub fn render_summary(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "queries: {}  inconsistent: {:.3}",
        summary.n_queries, summary.inconsistent_proportion
    );
    let width = summary.splits.values().flat_map(|rows| rows.keys()).map(String::len).max().unwrap_or(3).max(3);
    for (split, rows) in &summary.splits {
        let n = rows.values().next().map(|r| r.n).unwrap_or(0);
        let _ = writeln!(out, "\n[{split}] n={n}");
        let _ = writeln!(out, "{:<width$} {:>8} {:>8}", "row", "ACC", "F1");
        for (name, r) in rows {
            let _ = writeln!(out, "{:<width$} {:>8.4} {:>8.4}", name, r.accuracy, r.macro_f1);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub split: String,
    pub n: usize,
    pub before: MetricReport,
    pub after: MetricReport,
    pub accuracy_gain: f64,
    pub f1_gain: f64,
}

/// Before/after comparison on splits fixed by the `before` dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub format: String,
    pub version: u32,
    pub rows: Vec<CompareRow>,
}

pub fn compare(before: &[FusedPrediction], after: &[FusedPrediction]) -> Result<Comparison, AnalysisError> {
    let before: Vec<FusedPrediction> = before.iter().filter(|p| p.task_kind.is_closed_set()).cloned().collect();
    let split = split_consistency(&before)?;
    let mut rows = Vec::new();
    for (name, ids) in split_ids(&split) {
        let b = subset(&before, &ids);
        let a = subset(after, &ids);
        if a.len() != b.len() {
            let missing = ids.iter().find(|id| !a.iter().any(|p| p.query_id == **id)).copied().unwrap_or("?");
            return Err(AnalysisError::MissingCandidates(missing.to_string()));
        }
        let (before, after) = (dump_eval(&b)?, dump_eval(&a)?);
        rows.push(CompareRow {
            split: name,
            n: b.len(),
            accuracy_gain: after.accuracy - before.accuracy,
            f1_gain: after.macro_f1 - before.macro_f1,
            before,
            after,
        });
    }
    Ok(Comparison { format: "ragdistill-compare".into(), version: 1, rows })
}

pub fn render_comparison(c: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "split", "n", "ACC before", "ACC after", "gain", "F1 before", "F1 after", "gain"
    );
    for r in &c.rows {
        let _ = writeln!(
            out,
            "{:<14} {:>5} {:>10.4} {:>10.4} {:>+10.4} {:>10.4} {:>10.4} {:>+10.4}",
            r.split, r.n, r.before.accuracy, r.after.accuracy, r.accuracy_gain, r.before.macro_f1, r.after.macro_f1, r.f1_gain
        );
    }
    out
}
