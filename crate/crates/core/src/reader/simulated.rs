use serde::{Deserialize, Serialize};

use super::{ReadContext, Reader, ReaderError};
use crate::noise::keyed_normal;

const LOG_FLOOR: f64 = 1e-12;

/// Parameters of the synthetic reader.
///
/// Without a candidate the reader answers from a per-query base
/// distribution: the confusion row of the query's true class, perturbed in
/// logit space by keyed Gaussian noise. A prepended candidate moves mass
/// `w` onto the candidate's label:
///
/// * `w = alpha` when the candidate's label matches the query's,
/// * `w = distractor_pull` when it does not,
///
/// each scaled by `off_view_relevance` when the candidate's view differs
/// from the query's. Without the query image the base is uniform and every
/// candidate pulls with `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatedReaderParams {
    pub alpha: f64,
    pub distractor_pull: f64,
    pub off_view_relevance: f64,
    /// Diagonal of the default confusion matrix; off-diagonal mass is uniform.
    pub base_confidence: f64,
    /// Explicit confusion matrix over the class vocabulary (rows sum to one).
    pub confusion: Option<Vec<Vec<f64>>>,
    pub logit_noise: f64,
    pub seed: u64,
}

impl Default for SimulatedReaderParams {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            distractor_pull: 0.9,
            off_view_relevance: 0.1,
            base_confidence: 0.55,
            confusion: None,
            logit_noise: 0.8,
            seed: 7,
        }
    }
}

impl SimulatedReaderParams {
    pub fn validate(&self) -> Result<(), ReaderError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ReaderError::InvalidParams(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("distractor_pull", self.distractor_pull)?;
        unit("off_view_relevance", self.off_view_relevance)?;
        unit("base_confidence", self.base_confidence)?;
        if !(self.logit_noise >= 0.0 && self.logit_noise.is_finite()) {
            return Err(ReaderError::InvalidParams(format!("logit_noise = {}", self.logit_noise)));
        }
        if let Some(m) = &self.confusion {
            for (i, row) in m.iter().enumerate() {
                if row.len() != m.len() {
                    return Err(ReaderError::InvalidParams(format!("confusion row {i} has wrong length")));
                }
                crate::types::validate_distribution(row)
                    .map_err(|e| ReaderError::InvalidParams(format!("confusion row {i}: {e}")))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedReader {
    params: SimulatedReaderParams,
}

impl SimulatedReader {
    pub fn new(params: SimulatedReaderParams) -> Result<Self, ReaderError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &SimulatedReaderParams {
        &self.params
    }

    fn confusion_row(&self, true_class: Option<usize>, n: usize) -> Result<Vec<f64>, ReaderError> {
        let Some(y) = true_class else {
            return Ok(vec![1.0 / n as f64; n]);
        };
        if let Some(m) = &self.params.confusion {
            if m.len() != n {
                return Err(ReaderError::InvalidParams(format!(
                    "confusion matrix is {}x{} but the vocabulary has {n} classes",
                    m.len(),
                    m.len()
                )));
            }
            return Ok(m[y].clone());
        }
        if n == 1 {
            return Ok(vec![1.0]);
        }
        let off = (1.0 - self.params.base_confidence) / (n - 1) as f64;
        let mut row = vec![off; n];
        row[y] = self.params.base_confidence;
        Ok(row)
    }

    /// The query-only answer distribution (no retrieved context).
    fn base(&self, ctx: &ReadContext<'_>, true_class: Option<usize>) -> Result<Vec<f64>, ReaderError> {
        let n = ctx.query.class_vocab.len();
        if !ctx.query_image {
            return Ok(vec![1.0 / n as f64; n]);
        }
        let row = self.confusion_row(true_class, n)?;
        let logits: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(c, p)| {
                p.max(LOG_FLOOR).ln()
                    + self.params.logit_noise * keyed_normal(self.params.seed, &ctx.query.query_id, c as u64)
            })
            .collect();
        Ok(crate::types::softmax(&logits, 1.0)?)
    }
}

impl Reader for SimulatedReader {
    fn identity(&self) -> String {
        let p = &self.params;
        format!(
            "simulated(alpha={},distractor_pull={},off_view={},base={},confusion={},noise={},seed={})",
            p.alpha,
            p.distractor_pull,
            p.off_view_relevance,
            p.base_confidence,
            if p.confusion.is_some() { "custom" } else { "diag" },
            p.logit_noise,
            p.seed
        )
    }

    fn read(&self, ctx: &ReadContext<'_>) -> Result<Vec<f64>, ReaderError> {
        let vocab = &ctx.query.class_vocab;
        let true_class = vocab.index_of(ctx.query.image_label());
        let mut probs = self.base(ctx, true_class)?;
        let Some(record) = ctx.candidate else {
            return Ok(probs);
        };
        let Some(label) = record.label().and_then(|l| vocab.index_of(l)) else {
            return Ok(probs);
        };
        let weight = if !ctx.query_image {
            self.params.alpha
        } else {
            let pull = if Some(label) == true_class { self.params.alpha } else { self.params.distractor_pull };
            let on_view = matches!((record.view(), ctx.query.view()), (Some(a), Some(b)) if a == b);
            if on_view {
                pull
            } else {
                pull * self.params.off_view_relevance
            }
        };
        for p in probs.iter_mut() {
            *p *= 1.0 - weight;
        }
        probs[label] += weight;
        Ok(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reader::score_candidate;
    use crate::types::{ClassVocab, Embedding, IndexRecord, Query, TaskKind};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn query(labels: &[&str], gold: &str, view: &str) -> Query {
        Query {
            query_id: "q-1".into(),
            image_emb: Embedding::new(vec![0.0]).unwrap(),
            question: "?".into(),
            gold_answer: gold.into(),
            class_vocab: ClassVocab::new(labels.iter().map(|s| s.to_string()).collect()).unwrap(),
            task_kind: TaskKind::Classification,
            payload_ref: format!("q#label={gold}&view={view}"),
        }
    }

    fn record(label: &str, view: &str) -> IndexRecord {
        IndexRecord {
            record_id: 1,
            image_emb: Embedding::new(vec![0.0]).unwrap(),
            text_emb: Embedding::new(vec![0.0]).unwrap(),
            payload_ref: format!("r#label={label}&view={view}"),
            source_tag: "t".into(),
        }
    }

    fn reader(alpha: f64, base: f64) -> SimulatedReader {
        SimulatedReader::new(SimulatedReaderParams {
            alpha,
            base_confidence: base,
            logit_noise: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn fully_informative_limit() {
        let q = query(&["yes", "no"], "yes", "v0");
        let p = score_candidate(&reader(1.0, 0.6), &q, &record("yes", "v0")).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uninformative_limit() {
        let q = query(&["yes", "no"], "yes", "v0");
        let p = score_candidate(&reader(0.0, 0.5), &q, &record("yes", "v0")).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn off_view_candidates_pull_less() {
        let q = query(&["a", "b", "c"], "a", "v0");
        let r = reader(0.9, 0.5);
        let on = score_candidate(&r, &q, &record("b", "v0")).unwrap();
        let off = score_candidate(&r, &q, &record("b", "v1")).unwrap();
        assert!(on[1] > off[1]);
        assert!(off[0] > on[0]);
    }

    #[test]
    fn imageless_reading_copies_candidate_label() {
        let q = query(&["a", "b"], "a", "v0");
        let r = reader(0.8, 0.9);
        let ctx = ReadContext::new(&q, None).without_query_image();
        assert_eq!(r.read(&ctx).unwrap(), vec![0.5, 0.5]);
        let rec = record("b", "v1");
        let ctx = ReadContext::new(&q, Some(&rec)).without_query_image();
        let p = r.read(&ctx).unwrap();
        assert_abs_diff_eq!(p[1], 0.9, epsilon = 1e-12);
    }

    #[test]
    fn noise_is_keyed_by_query() {
        let r = SimulatedReader::new(SimulatedReaderParams::default()).unwrap();
        let q = query(&["a", "b", "c"], "a", "v0");
        let rec = record("a", "v0");
        assert_eq!(score_candidate(&r, &q, &rec).unwrap(), score_candidate(&r, &q, &rec).unwrap());
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = SimulatedReaderParams { alpha: 1.5, ..Default::default() };
        assert!(SimulatedReader::new(bad).is_err());
        let bad = SimulatedReaderParams { confusion: Some(vec![vec![0.5, 0.6], vec![0.5, 0.5]]), ..Default::default() };
        assert!(SimulatedReader::new(bad).is_err());
    }

    proptest! {
        #[test]
        fn gold_probability_monotone_in_alpha(
            a1 in 0.0f64..1.0, a2 in 0.0f64..1.0,
            noise in 0.0f64..2.0, seed in 0u64..1000,
            on_view in any::<bool>(),
        ) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let q = query(&["a", "b", "c", "d"], "c", "v2");
            let rec = record("c", if on_view { "v2" } else { "v0" });
            let mk = |alpha| SimulatedReader::new(SimulatedReaderParams { alpha, logit_noise: noise, seed, ..Default::default() }).unwrap();
            let p_lo = score_candidate(&mk(lo), &q, &rec).unwrap();
            let p_hi = score_candidate(&mk(hi), &q, &rec).unwrap();
            prop_assert!(p_hi[2] + 1e-12 >= p_lo[2]);
        }

        #[test]
        fn outputs_are_distributions(seed in 0u64..10_000, label in 0usize..4, view in 0usize..4) {
            let labels = ["a", "b", "c", "d"];
            let q = query(&labels, "b", "v1");
            let r = SimulatedReader::new(SimulatedReaderParams { seed, ..Default::default() }).unwrap();
            let p = score_candidate(&r, &q, &record(labels[label], &format!("v{view}"))).unwrap();
            prop_assert!(crate::types::validate_distribution(&p).is_ok());
        }
    }
}
