//! Run manifests: the resolved config plus per-stage input and output
//! hashes. A stage whose fingerprint and outputs are unchanged is skipped.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FORMAT: &str = "ragdistill-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub status: StageStatus,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = std::fs::File::open(path).map_err(|_| CliError::missing(path))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// An output directory with its manifest.
pub struct Run {
    dir: PathBuf,
    manifest: Manifest,
    force: bool,
}

impl Run {
    /// Create the directory and write the manifest before anything else.
    /// Stage records from an earlier run are kept so completed stages can
    /// be skipped.
    pub fn open(config: &RunConfig, force: bool) -> CliResult<Self> {
        let dir = config.paths.out_dir.clone();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(MANIFEST_FILE);
        let stages = if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let old: Manifest = serde_json::from_str(&text).map_err(|e| CliError::invalid(&path, e))?;
            if old.format != MANIFEST_FORMAT || old.version != MANIFEST_VERSION {
                return Err(CliError::invalid(&path, "unsupported manifest format"));
            }
            old.stages
        } else {
            BTreeMap::new()
        };
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config: config.clone(),
            stages,
        };
        let run = Self { dir, manifest, force };
        run.save()?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn save(&self) -> CliResult<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, text + "\n")?;
        std::fs::rename(tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir).unwrap_or(path).display().to_string()
    }

    /// Run `body` unless a completed record with the same fingerprint exists
    /// and every recorded output is still present and unchanged. Outputs must
    /// not overlap inputs.
    pub fn stage<P: Serialize>(
        &mut self,
        name: &str,
        params: &P,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        body: impl FnOnce() -> CliResult<()>,
    ) -> CliResult<StageOutcome> {
        for out in outputs {
            if inputs.contains(out) {
                return Err(CliError::config(format!("stage {name} would overwrite its input {}", out.display())));
            }
        }
        let mut input_hashes = BTreeMap::new();
        for p in inputs {
            input_hashes.insert(self.key(p), sha256_file(p)?);
        }
        let fingerprint = {
            let params = serde_json::to_string(params).expect("stage params serialize");
            let inputs = serde_json::to_string(&input_hashes).expect("hashes serialize");
            sha256_bytes(format!("{name}\n{params}\n{inputs}").as_bytes())
        };
        if !self.force && self.is_current(name, &fingerprint, outputs) {
            eprintln!("stage {name}: up to date, skipping");
            return Ok(StageOutcome::Skipped);
        }
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                fingerprint: fingerprint.clone(),
                status: StageStatus::Running,
                inputs: input_hashes.clone(),
                outputs: BTreeMap::new(),
            },
        );
        self.save()?;
        body()?;
        let mut output_hashes = BTreeMap::new();
        for p in outputs {
            output_hashes.insert(self.key(p), sha256_file(p)?);
        }
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord { fingerprint, status: StageStatus::Done, inputs: input_hashes, outputs: output_hashes },
        );
        self.save()?;
        Ok(StageOutcome::Ran)
    }

    fn is_current(&self, name: &str, fingerprint: &str, outputs: &[PathBuf]) -> bool {
        let Some(rec) = self.manifest.stages.get(name) else {
            return false;
        };
        if rec.status != StageStatus::Done || rec.fingerprint != fingerprint || rec.outputs.len() != outputs.len() {
            return false;
        }
        outputs.iter().all(|p| {
            rec.outputs.get(&self.key(p)).is_some_and(|h| sha256_file(p).is_ok_and(|cur| &cur == h))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.paths.out_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn manifest_is_written_before_stage_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = Run::open(&config(tmp.path()), false).unwrap();
        let out = run.path("a.txt");
        let manifest_path = run.path(MANIFEST_FILE);
        run.stage("s", &1, &[], std::slice::from_ref(&out), || {
            let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
            assert_eq!(m.stages["s"].status, StageStatus::Running);
            std::fs::write(&out, "x").unwrap();
            Ok(())
        })
        .unwrap();
        assert_eq!(run.manifest().stages["s"].status, StageStatus::Done);
    }

    #[test]
    fn completed_stage_is_skipped_until_something_changes() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("in.txt");
        std::fs::write(&input, "1").unwrap();
        let out = tmp.path().join("out.txt");
        let go = |run: &mut Run, p: u32| {
            run.stage("s", &p, std::slice::from_ref(&input), std::slice::from_ref(&out), || Ok(std::fs::write(&out, "y")?)).unwrap()
        };
        let mut run = Run::open(&config(tmp.path()), false).unwrap();
        assert_eq!(go(&mut run, 1), StageOutcome::Ran);
        let mut run = Run::open(&config(tmp.path()), false).unwrap();
        assert_eq!(go(&mut run, 1), StageOutcome::Skipped);
        assert_eq!(go(&mut run, 2), StageOutcome::Ran);
        std::fs::write(&input, "2").unwrap();
        assert_eq!(go(&mut run, 2), StageOutcome::Ran);
        std::fs::write(&out, "tampered").unwrap();
        assert_eq!(go(&mut run, 2), StageOutcome::Ran);
        let mut forced = Run::open(&config(tmp.path()), true).unwrap();
        assert_eq!(go(&mut forced, 2), StageOutcome::Ran);
    }

    #[test]
    fn outputs_may_not_overwrite_inputs() {
        let tmp = tempfile::tempdir().unwrap();
        let f = tmp.path().join("f");
        std::fs::write(&f, "1").unwrap();
        let mut run = Run::open(&config(tmp.path()), false).unwrap();
        let err = run.stage("s", &(), std::slice::from_ref(&f), std::slice::from_ref(&f), || Ok(())).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
