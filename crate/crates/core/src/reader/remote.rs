use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ReadContext, Reader, ReaderError};

/// Environment variable overriding the configured endpoint.
pub const ENDPOINT_ENV: &str = "RAGDISTILL_READER_ENDPOINT";

const RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteReaderConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_in_flight() -> usize {
    8
}
fn default_backoff_ms() -> u64 {
    100
}

impl RemoteReaderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), ReaderError> {
        if self.timeout_ms == 0 {
            return Err(ReaderError::InvalidParams("remote timeout must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ReaderError::InvalidParams("max_in_flight must be ≥ 1".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(ReaderError::InvalidParams("empty reader endpoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateBody {
    pub record_id: u64,
    pub payload_ref: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequestBody {
    pub query_id: String,
    pub question: String,
    /// `None` when the query image is withheld.
    pub query_payload_ref: Option<String>,
    pub candidate: Option<CandidateBody>,
    pub class_labels: Vec<String>,
}

impl ScoreRequestBody {
    pub fn from_context(ctx: &ReadContext<'_>) -> Self {
        Self {
            query_id: ctx.query.query_id.clone(),
            question: ctx.query.question.clone(),
            query_payload_ref: ctx.query_image.then(|| ctx.query.payload_ref.clone()),
            candidate: ctx.candidate.map(|r| CandidateBody {
                record_id: r.record_id,
                payload_ref: r.payload_ref.clone(),
                caption: r.caption(),
            }),
            class_labels: ctx.query.class_vocab.labels().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponseBody {
    pub log_probs: Vec<f64>,
}

impl ScoreResponseBody {
    /// Exponentiate and renormalize.
    pub fn into_distribution(self, n: usize) -> Result<Vec<f64>, ReaderError> {
        if self.log_probs.len() != n {
            return Err(ReaderError::RemoteMalformedResponse(format!(
                "{} log-probs for {n} classes",
                self.log_probs.len()
            )));
        }
        if self.log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(ReaderError::RemoteMalformedResponse("non-finite log-prob".into()));
        }
        let max = self.log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(ReaderError::RemoteMalformedResponse("all log-probs are -inf".into()));
        }
        let exp: Vec<f64> = self.log_probs.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        Ok(exp.into_iter().map(|e| e / total).collect())
    }
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock poisoned");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Client for the JSON scoring protocol (`POST /score`, `GET /healthz`).
pub struct RemoteReader {
    config: RemoteReaderConfig,
    client: reqwest::blocking::Client,
    slots: Slots,
}

enum Attempt {
    Retry(ReaderError),
    Fail(ReaderError),
}

impl RemoteReader {
    pub fn new(config: RemoteReaderConfig) -> Result<Self, ReaderError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ReaderError::RemoteUnavailable(e.to_string()))?;
        let slots = Slots { free: Mutex::new(config.max_in_flight), cv: Condvar::new() };
        Ok(Self { config, client, slots })
    }

    /// Apply the endpoint override from the environment, if set.
    pub fn from_env_or(config: RemoteReaderConfig) -> Result<Self, ReaderError> {
        let mut config = config;
        if let Ok(ep) = std::env::var(ENDPOINT_ENV) {
            if !ep.trim().is_empty() {
                config.endpoint = ep;
            }
        }
        Self::new(config)
    }

    pub fn config(&self) -> &RemoteReaderConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.endpoint.trim_end_matches('/'))
    }

    pub fn health(&self) -> Result<(), ReaderError> {
        let resp = self
            .client
            .get(self.url("/healthz"))
            .send()
            .map_err(|e| ReaderError::RemoteUnavailable(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(ReaderError::RemoteUnavailable(format!("health check returned {}", resp.status())))
        }
    }

    fn attempt(&self, body: &ScoreRequestBody, n: usize) -> Result<Vec<f64>, Attempt> {
        let resp = self
            .client
            .post(self.url("/score"))
            .json(body)
            .send()
            .map_err(|e| Attempt::Retry(ReaderError::RemoteUnavailable(e.to_string())))?;
        let status = resp.status();
        if status.is_server_error() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Retry(ReaderError::RemoteRejected { status: status.as_u16(), body: text }));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Fail(ReaderError::RemoteRejected { status: status.as_u16(), body: text }));
        }
        let text = resp.text().map_err(|e| Attempt::Retry(ReaderError::RemoteUnavailable(e.to_string())))?;
        let parsed: ScoreResponseBody =
            serde_json::from_str(&text).map_err(|e| Attempt::Fail(ReaderError::RemoteMalformedResponse(e.to_string())))?;
        parsed.into_distribution(n).map_err(Attempt::Fail)
    }
}

impl Reader for RemoteReader {
    fn identity(&self) -> String {
        format!("remote({})", self.config.endpoint)
    }

    fn read(&self, ctx: &ReadContext<'_>) -> Result<Vec<f64>, ReaderError> {
        let body = ScoreRequestBody::from_context(ctx);
        let n = ctx.query.class_vocab.len();
        let _slot = self.slots.acquire();
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut tries = 0;
        loop {
            match self.attempt(&body, n) {
                Ok(p) => return Ok(p),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(e)) if tries >= RETRIES => return Err(e),
                Err(Attempt::Retry(_)) => {
                    tries += 1;
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn response_is_exponentiated_and_renormalized() {
        let p = ScoreResponseBody { log_probs: vec![2.0, 0.0] }.into_distribution(2).unwrap();
        assert_abs_diff_eq!(p[0], 2f64.exp() / (2f64.exp() + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(p[0], 0.8808, epsilon = 1e-4);
    }

    #[test]
    fn malformed_responses_rejected() {
        let wrong_len = ScoreResponseBody { log_probs: vec![0.0] }.into_distribution(2);
        assert!(matches!(wrong_len, Err(ReaderError::RemoteMalformedResponse(_))));
        let nan = ScoreResponseBody { log_probs: vec![f64::NAN, 0.0] }.into_distribution(2);
        assert!(matches!(nan, Err(ReaderError::RemoteMalformedResponse(_))));
    }

    #[test]
    fn zero_timeout_rejected() {
        let cfg = RemoteReaderConfig { timeout_ms: 0, ..RemoteReaderConfig::new("http://127.0.0.1:1") };
        assert!(RemoteReader::new(cfg).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        let cfg = RemoteReaderConfig { backoff_ms: 1, timeout_ms: 200, ..RemoteReaderConfig::new("http://127.0.0.1:9") };
        let reader = RemoteReader::new(cfg).unwrap();
        assert!(matches!(reader.health(), Err(ReaderError::RemoteUnavailable(_))));
    }
}
