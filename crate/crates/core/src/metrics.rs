//! Evaluation metrics: accuracy, macro F1 with per-class precision and
//! recall, exact match, and token-set precision/recall/F1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::TaskKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("{0} predictions for {1} references")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token: Option<TokenScores>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check<T, U>(pred: &[T], gold: &[U]) -> Result<(), MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gold.len()));
    }
    if gold.is_empty() {
        return Err(MetricError::EmptyEvalSet);
    }
    Ok(())
}

pub fn accuracy<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<f64, MetricError> {
    check(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(ratio(hits, gold.len()))
}

/// Per-class precision/recall/F1 over every label seen in either list,
/// in sorted label order. Undefined ratios count as 0.
pub fn per_class<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<Vec<ClassStats>, MetricError> {
    check(pred, gold)?;
    #[derive(Default)]
    struct Counts {
        tp: usize,
        fp: usize,
        fn_: usize,
    }
    let mut counts: BTreeMap<&str, Counts> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (p.as_ref(), g.as_ref());
        if p == g {
            counts.entry(p).or_default().tp += 1;
        } else {
            counts.entry(p).or_default().fp += 1;
            counts.entry(g).or_default().fn_ += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(label, c)| {
            let precision = ratio(c.tp, c.tp + c.fp);
            let recall = ratio(c.tp, c.tp + c.fn_);
            ClassStats { label: label.to_owned(), precision, recall, f1: f1(precision, recall), support: c.tp + c.fn_ }
        })
        .collect())
}

pub fn macro_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<f64, MetricError> {
    let stats = per_class(pred, gold)?;
    Ok(stats.iter().map(|s| s.f1).sum::<f64>() / stats.len() as f64)
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Fraction of answers equal after lowercasing and whitespace collapsing.
pub fn exact_match<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<f64, MetricError> {
    check(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| normalize(p.as_ref()) == normalize(g.as_ref())).count();
    Ok(ratio(hits, gold.len()))
}

/// Lowercased, whitespace-split, deduplicated tokens.
pub fn token_set(s: &str) -> BTreeSet<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

pub fn token_scores(pred: &str, gold: &str) -> TokenScores {
    let (p, g) = (token_set(pred), token_set(gold));
    let common = p.intersection(&g).count();
    let precision = ratio(common, p.len());
    let recall = ratio(common, g.len());
    TokenScores { precision, recall, f1: f1(precision, recall) }
}

/// Token scores averaged over answers.
pub fn mean_token_scores<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<TokenScores, MetricError> {
    check(pred, gold)?;
    let n = gold.len() as f64;
    let mut acc = TokenScores { precision: 0.0, recall: 0.0, f1: 0.0 };
    for (p, g) in pred.iter().zip(gold) {
        let s = token_scores(p.as_ref(), g.as_ref());
        acc.precision += s.precision / n;
        acc.recall += s.recall / n;
        acc.f1 += s.f1 / n;
    }
    Ok(acc)
}

/// Multi-label tasks: each label is a binary problem and the positive-class
/// F1 scores are averaged over `labels`.
pub fn multi_label_macro_f1(
    pred: &[BTreeSet<String>],
    gold: &[BTreeSet<String>],
    labels: &[String],
) -> Result<f64, MetricError> {
    check(pred, gold)?;
    if labels.is_empty() {
        return Err(MetricError::EmptyEvalSet);
    }
    let total: f64 = labels
        .iter()
        .map(|l| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (p, g) in pred.iter().zip(gold) {
                match (p.contains(l), g.contains(l)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            f1(ratio(tp, tp + fp), ratio(tp, tp + fn_))
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Everything applicable to `task`.
pub fn metrics<S: AsRef<str>>(pred: &[S], gold: &[S], task: TaskKind) -> Result<MetricReport, MetricError> {
    let per_class = per_class(pred, gold)?;
    let macro_f1 = per_class.iter().map(|s| s.f1).sum::<f64>() / per_class.len() as f64;
    Ok(MetricReport {
        n: gold.len(),
        accuracy: accuracy(pred, gold)?,
        macro_f1,
        per_class,
        exact_match: matches!(task, TaskKind::VqaClosed | TaskKind::VqaOpen).then(|| exact_match(pred, gold)).transpose()?,
        token: (task == TaskKind::VqaOpen).then(|| mean_token_scores(pred, gold)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn all_correct() {
        let g = ["a", "b", "c"];
        let r = metrics(&g, &g, TaskKind::Classification).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn hand_confusion_matrix() {
        let gold = ["A", "A", "B", "B"];
        let pred = ["A", "B", "B", "B"];
        assert_eq!(accuracy(&pred, &gold).unwrap(), 0.75);
        let stats = per_class(&pred, &gold).unwrap();
        assert_abs_diff_eq!(stats[0].f1, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats[1].f1, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(macro_f1(&pred, &gold).unwrap(), (2.0 / 3.0 + 0.8) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn unseen_prediction_label_counts_zero() {
        let stats = per_class(&["x"], &["a"]).unwrap();
        assert_eq!(stats.len(), 2);
        assert!(stats.iter().all(|s| s.f1 == 0.0));
    }

    #[test]
    fn token_overlap() {
        let s = token_scores("lung", "left lung");
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.precision, 1.0);
        assert_abs_diff_eq!(s.f1, 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(token_scores("Lung lung", "LUNG"), TokenScores { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(token_scores("", "x").f1, 0.0);
    }

    #[test]
    fn exact_match_normalizes_case_and_space() {
        assert_eq!(exact_match(&["Yes ", "no"], &["yes", "yes"]).unwrap(), 0.5);
    }

    #[test]
    fn multi_label() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        let gold = vec![s(&["a", "b"]), s(&["b"])];
        let pred = vec![s(&["a"]), s(&["b", "c"])];
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|x| x.to_string()).collect();
        // a: F1 1; b: tp1 fn1 → 2/3; c: fp1 → 0.
        assert_abs_diff_eq!(multi_label_macro_f1(&pred, &gold, &labels).unwrap(), (1.0 + 2.0 / 3.0) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_set_rejected() {
        let e: [&str; 0] = [];
        assert_eq!(accuracy(&e, &e), Err(MetricError::EmptyEvalSet));
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_bounded(
            pairs in prop::collection::vec((0u8..4, 0u8..4), 1..40),
            rot in 0usize..40,
        ) {
            let pred: Vec<String> = pairs.iter().map(|p| format!("c{}", p.0)).collect();
            let gold: Vec<String> = pairs.iter().map(|p| format!("c{}", p.1)).collect();
            let a = metrics(&pred, &gold, TaskKind::VqaClosed).unwrap();
            let r = rot % pairs.len();
            let (mut p2, mut g2) = (pred.clone(), gold.clone());
            p2.rotate_left(r);
            g2.rotate_left(r);
            let b = metrics(&p2, &g2, TaskKind::VqaClosed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!((0.0..=1.0).contains(&a.accuracy) && (0.0..=1.0).contains(&a.macro_f1));
        }
    }
}
