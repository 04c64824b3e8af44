//! Remote reader against an in-process HTTP server with injected faults.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use ragdistill::reader::{batch_score, RemoteReader, RemoteReaderConfig, ScoreRequestBody, ScoreResponseBody};
use ragdistill::{ClassVocab, Embedding, IndexRecord, Query, Reader, ReaderError, TaskKind};

#[derive(Default)]
struct Faults {
    /// Requests seen for the flaky record; the first one gets a 503.
    flaky_hits: AtomicUsize,
}

const BROKEN: u64 = 3;
const FLAKY: u64 = 1;
const GARBLED: u64 = 9;

async fn score(State(f): State<Arc<Faults>>, Json(body): Json<ScoreRequestBody>) -> Result<String, StatusCode> {
    let id = body.candidate.as_ref().map(|c| c.record_id);
    if id == Some(BROKEN) {
        return Err(StatusCode::BAD_REQUEST);
    }
    if id == Some(FLAKY) && f.flaky_hits.fetch_add(1, Ordering::SeqCst) == 0 {
        return Err(StatusCode::SERVICE_UNAVAILABLE);
    }
    if id == Some(GARBLED) {
        return Ok("{\"log_probs\": [1.0]".into());
    }
    let mut log_probs = vec![0.0; body.class_labels.len()];
    log_probs[0] = 2.0;
    Ok(serde_json::to_string(&ScoreResponseBody { log_probs }).unwrap())
}

fn spawn_server() -> (SocketAddr, Arc<Faults>) {
    let faults = Arc::new(Faults::default());
    let app = Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/score", post(score))
        .with_state(faults.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), faults)
}

fn vocab() -> ClassVocab {
    ClassVocab::new(vec!["yes".into(), "no".into()]).unwrap()
}

fn query() -> Query {
    Query {
        query_id: "q0".into(),
        image_emb: Embedding::new(vec![1.0, 0.0]).unwrap(),
        question: "Is there an effusion?".into(),
        gold_answer: "yes".into(),
        class_vocab: vocab(),
        task_kind: TaskKind::VqaClosed,
        payload_ref: "img://q0".into(),
    }
}

fn record(id: u64) -> IndexRecord {
    let e = Embedding::new(vec![0.0, 1.0]).unwrap();
    IndexRecord {
        record_id: id,
        image_emb: e.clone(),
        text_emb: e,
        payload_ref: format!("img://r{id}"),
        source_tag: "test".into(),
    }
}

fn reader(addr: SocketAddr) -> RemoteReader {
    let mut cfg = RemoteReaderConfig::new(format!("http://{addr}"));
    cfg.backoff_ms = 5;
    cfg.max_in_flight = 2;
    RemoteReader::new(cfg).unwrap()
}

#[test]
fn batch_reports_failing_row_without_aborting() {
    let (addr, _) = spawn_server();
    let reader = reader(addr);
    reader.health().unwrap();
    let q = query();
    let records: Vec<IndexRecord> = [0, 2, BROKEN, 4].into_iter().map(record).collect();
    let pairs: Vec<(&Query, &IndexRecord)> = records.iter().map(|r| (&q, r)).collect();
    let out = batch_score(&reader, &pairs, &vocab(), 4);
    assert_eq!(out.table.len(), 3);
    assert_eq!(out.errors.len(), 1);
    assert_eq!(out.errors[0].key.record_id, Some(BROKEN));
    assert!(matches!(out.errors[0].error, ReaderError::RemoteRejected { status: 400, .. }));
    for (_, p) in out.table.rows() {
        let expected = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((p[0] - expected).abs() < 1e-12);
    }
}

#[test]
fn transient_server_errors_are_retried() {
    let (addr, faults) = spawn_server();
    let reader = reader(addr);
    let q = query();
    let r = record(FLAKY);
    let p = reader.read(&ragdistill::reader::ReadContext::new(&q, Some(&r))).unwrap();
    assert_eq!(faults.flaky_hits.load(Ordering::SeqCst), 2);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn truncated_body_is_malformed() {
    let (addr, _) = spawn_server();
    let reader = reader(addr);
    let q = query();
    let r = record(GARBLED);
    let err = reader.read(&ragdistill::reader::ReadContext::new(&q, Some(&r))).unwrap_err();
    assert!(matches!(err, ReaderError::RemoteMalformedResponse(_)), "{err:?}");
}
