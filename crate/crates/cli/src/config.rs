//! Run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` TOML file,
//! the `--spec` synthetic-corpus file, then command-line flags. The
//! top-level `seed` is copied into every seeded component on resolution.

use std::path::{Path, PathBuf};

use ragdistill::distill::TrainerConfig;
use ragdistill::fusion::InferenceMode;
use ragdistill::index::MergePolicy;
use ragdistill::reader::ReaderSpec;
use ragdistill::synth::SynthSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker cap; 0 means one per available core.
    pub jobs: usize,
    /// Run every parallel section on one worker.
    pub deterministic: bool,
    pub paths: Paths,
    pub synth: SynthSpec,
    /// Inconsistency injection rate applied after generation, if any.
    pub inject_rate: Option<f64>,
    pub reader: ReaderSpec,
    pub trainer: TrainerConfig,
    pub inference: InferenceSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            jobs: 0,
            deterministic: false,
            paths: Paths::default(),
            synth: SynthSpec::default(),
            inject_rate: None,
            reader: ReaderSpec::default(),
            trainer: TrainerConfig { candidates: 8, ..TrainerConfig::default() },
            inference: InferenceSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Reader score table; written after remote scoring, read when the
    /// remote reader is unreachable.
    pub cache: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("run"), cache: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub k: usize,
    pub merge: MergePolicy,
    /// Modes written by `pipeline`, each to its own prediction dump.
    pub modes: Vec<InferenceMode>,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            k: 4,
            merge: MergePolicy::UnionRerank,
            modes: vec![
                InferenceMode::Fused,
                InferenceMode::RandomRetrieval,
                InferenceMode::NoRetrieval,
                InferenceMode::NoQueryImage,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub top1_similarity: bool,
    pub top_logit: bool,
    /// Skill of the simulated external chooser; `None` disables it.
    pub simulated_chooser: Option<f64>,
    /// Also run untrained heads and emit a before/after comparison.
    pub compare_untrained: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { top1_similarity: true, top_logit: true, simulated_chooser: Some(0.8), compare_untrained: true }
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub deterministic: bool,
    pub out_dir: Option<PathBuf>,
    pub spec: Option<PathBuf>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg: RunConfig = match file {
            Some(p) => read_toml(p)?,
            None => RunConfig::default(),
        };
        if let Some(spec) = &overrides.spec {
            cfg.synth = read_toml(spec)?;
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(j) = overrides.jobs {
            cfg.jobs = j;
        }
        if overrides.deterministic {
            cfg.deterministic = true;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.paths.out_dir = out.clone();
        }
        cfg.resolve()
    }

    /// Propagate the seed and validate.
    pub fn resolve(mut self) -> CliResult<Self> {
        self.synth.seed = self.seed;
        self.trainer.seed = self.seed;
        if let ReaderSpec::Simulated(p) = &mut self.reader {
            p.seed = self.seed;
        }
        self.trainer.workers = self.workers();
        self.synth.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.trainer.validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.inference.k == 0 {
            return Err(CliError::config("inference.k must be at least 1"));
        }
        if let Some(r) = self.inject_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(CliError::config(format!("inject_rate {r} is outside [0, 1]")));
            }
        }
        if let Some(s) = self.analysis.simulated_chooser {
            if !(0.0..=1.0).contains(&s) {
                return Err(CliError::config(format!("simulated_chooser {s} is outside [0, 1]")));
            }
        }
        if let ReaderSpec::Remote(r) = &self.reader {
            r.validate().map_err(|e| CliError::config(e.to_string()))?;
        }
        Ok(self)
    }

    pub fn workers(&self) -> usize {
        if self.deterministic {
            1
        } else if self.jobs == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.jobs
        }
    }

    pub fn inference(&self) -> ragdistill::fusion::InferenceConfig {
        ragdistill::fusion::InferenceConfig { k: self.inference.k, merge: self.inference.merge, seed: self.seed }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_override_file_and_seed_propagates() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "seed = 3\njobs = 2\n[trainer]\nepochs = 5\n").unwrap();
        let cfg = RunConfig::load(Some(&file), &Overrides { seed: Some(11), ..Default::default() }).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.synth.seed, 11);
        assert_eq!(cfg.trainer.seed, 11);
        assert_eq!(cfg.trainer.epochs, 5);
        assert_eq!(cfg.trainer.workers, 2);
        let det = RunConfig::load(Some(&file), &Overrides { deterministic: true, ..Default::default() }).unwrap();
        assert_eq!(det.trainer.workers, 1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "sede = 3\n").unwrap();
        assert_eq!(RunConfig::load(Some(&file), &Overrides::default()).unwrap_err().exit_code(), 2);
        std::fs::write(&file, "[trainer]\ntemperature = 0.0\n").unwrap();
        assert_eq!(RunConfig::load(Some(&file), &Overrides::default()).unwrap_err().exit_code(), 2);
        let missing = dir.path().join("absent.toml");
        assert_eq!(RunConfig::load(Some(&missing), &Overrides::default()).unwrap_err().exit_code(), 3);
    }
}
