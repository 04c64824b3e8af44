//! End-to-end checks of the `ragdistill` binary on a small corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seed = 3
[synth]
classes = 3
dim = 8
records_per_class = 12
queries_per_class = 6
train_queries_per_class = 6
[trainer]
epochs = 4
candidates = 4
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ragdistill"));
    c.env_remove("RAGDISTILL_READER_ENDPOINT");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_body(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has an error line");
    serde_json::from_str::<Value>(line).expect("error is JSON")["error"].clone()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        std::fs::write(dir.join("run.toml"), config).unwrap();
        Self { _tmp: tmp, dir }
    }

    fn ok(&self, args: &[&str]) -> String {
        let mut full = vec!["--config", "run.toml", "--out", "out"];
        full.extend_from_slice(args);
        ok(&full, &self.dir)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.join("out").join(name)
    }
}

#[test]
fn stages_chain_through_files() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["synth"]);
    assert!(ws.out("manifest.json").exists());

    let stats: Value = serde_json::from_str(&ok(&["index", "inspect", "--index", "out/index.bin"], &ws.dir)).unwrap();
    assert_eq!(stats["dim"], 8);
    assert_eq!(stats["records"], 36);

    ws.ok(&["index", "build", "--corpus", "out/corpus.jsonl", "--dtype", "f16"]);
    ws.ok(&["train", "--index", "out/index.bin", "--queries", "out/queries-train.jsonl"]);
    let heads = ws.out("heads.bin");
    assert!(heads.exists());
    let losses = std::fs::read_to_string(ws.out("loss-history.jsonl")).unwrap();
    assert!(losses.lines().count() >= 8);

    ws.ok(&["retrieve", "--index", "out/index.bin", "--queries", "out/queries-eval.jsonl", "--heads", "out/heads.bin", "--k", "3"]);
    let candidates = std::fs::read_to_string(ws.out("candidates.jsonl")).unwrap();
    assert!(candidates.lines().count() >= 18);

    let dumps = ws.ok(&[
        "infer", "--index", "out/index.bin", "--queries", "out/queries-eval.jsonl", "--heads", "out/heads.bin",
        "--mode", "fused", "--mode", "no_retrieval",
    ]);
    assert_eq!(dumps.lines().count(), 2);
    ws.ok(&["infer", "--index", "out/index.bin", "--queries", "out/queries-eval.jsonl", "--mode", "fused", "--prefix", "untrained-"]);

    let fused = ws.out("predictions-fused.jsonl");
    let untrained = ws.out("predictions-untrained-fused.jsonl");
    assert!(fused.exists() && untrained.exists(), "{dumps}");
    let report = ws.ok(&[
        "analyze",
        "--predictions",
        fused.to_str().unwrap(),
        "--extra",
        &format!("none={}", ws.out("predictions-no_retrieval.jsonl").display()),
        "--compare",
        untrained.to_str().unwrap(),
        fused.to_str().unwrap(),
    ]);
    assert!(report.contains("oracle"), "{report}");
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(ws.out("summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());
    assert!(ws.out("comparison.json").exists());
}

#[test]
fn pipeline_rerun_skips_completed_stages() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["pipeline"]);
    let first = std::fs::read(ws.out("summary.json")).unwrap();
    let again = run(&["--config", "run.toml", "--out", "out", "pipeline"], &ws.dir);
    assert!(again.status.success());
    let stderr = String::from_utf8_lossy(&again.stderr);
    assert!(stderr.contains("up to date, skipping"), "{stderr}");
    assert_eq!(std::fs::read(ws.out("summary.json")).unwrap(), first);
}

#[test]
fn bad_config_exits_2() {
    let ws = Workspace::new("sede = 1\n");
    let out = run(&["--config", "run.toml", "--out", "out", "synth"], &ws.dir);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_body(&out)["exit_code"], 2);

    let ws = Workspace::new(SMALL);
    let out = run(&["--config", "run.toml", "--out", "out", "synth", "--inject-rate", "1.5"], &ws.dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifact_exits_3() {
    let ws = Workspace::new(SMALL);
    let out = run(&["index", "inspect", "--index", "nowhere.bin"], &ws.dir);
    assert_eq!(out.status.code(), Some(3));
    let body = error_body(&out);
    assert!(body["message"].as_str().unwrap().contains("nowhere.bin"), "{body}");
}

#[test]
fn corrupt_index_exits_3() {
    let ws = Workspace::new(SMALL);
    std::fs::write(ws.dir.join("bad.bin"), b"not an index").unwrap();
    let out = run(&["index", "inspect", "--index", "bad.bin"], &ws.dir);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unreachable_reader_without_cache_names_the_cache() {
    // Port 9 on localhost is the discard service and is not expected to be listening.
    let config = format!("{SMALL}\n[reader]\nkind = \"remote\"\nendpoint = \"http://127.0.0.1:9\"\ntimeout_ms = 500\n");
    let ws = Workspace::new(&config);
    let sim = Workspace::new(SMALL);
    sim.ok(&["synth"]);
    let index = sim.out("index.bin");
    let queries = sim.out("queries-train.jsonl");
    let out = run(
        &["--config", "run.toml", "--out", "out", "train", "--index", index.to_str().unwrap(), "--queries", queries.to_str().unwrap()],
        &ws.dir,
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let body = error_body(&out);
    assert!(body["message"].as_str().unwrap().contains("reader-cache.jsonl"), "{body}");
}
