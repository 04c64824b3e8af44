use std::path::Path;

use ragdistill::analysis::AnalysisError;
use ragdistill::distill::DistillError;
use ragdistill::fusion::FusionError;
use ragdistill::index::IndexError;
use ragdistill::reader::ReaderError;
use ragdistill::synth::SynthError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ConfigInvalid,
    ArtifactMissing,
    ArtifactInvalid,
    Reader,
    Invariant,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::ConfigInvalid => 2,
            Category::ArtifactMissing | Category::ArtifactInvalid => 3,
            Category::Reader => 4,
            Category::Invariant => 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    category: Category,
    exit_code: i32,
    message: &'a str,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::ConfigInvalid, message)
    }

    pub fn missing(path: &Path) -> Self {
        Self::new(Category::ArtifactMissing, format!("missing artifact: {}", path.display()))
    }

    pub fn invalid(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::new(Category::ArtifactInvalid, format!("{}: {err}", path.display()))
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        Self::new(Category::Invariant, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.category.exit_code()
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        let body = ErrorBody { category: self.category, exit_code: self.exit_code(), message: &self.message };
        serde_json::to_string(&serde_json::json!({ "error": body })).expect("error serializes")
    }

    pub fn context(self, what: impl std::fmt::Display) -> Self {
        Self { message: format!("{what}: {}", self.message), ..self }
    }
}

impl From<ReaderError> for CliError {
    fn from(e: ReaderError) -> Self {
        match e {
            ReaderError::InvalidParams(_) => Self::config(e.to_string()),
            _ => Self::new(Category::Reader, e.to_string()),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Reader { .. } => Self::new(Category::Reader, e.to_string()),
            DistillError::InvalidConfig(_) | DistillError::NoTrainableQueries => Self::config(e.to_string()),
            _ => Self::invariant(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Reader { .. } => Self::new(Category::Reader, e.to_string()),
            FusionError::UnsupportedMode { .. } => Self::config(e.to_string()),
            FusionError::MalformedDump(_) => Self::new(Category::ArtifactInvalid, e.to_string()),
            _ => Self::invariant(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Fusion(f) => f.into(),
            AnalysisError::MalformedChoices(_) => Self::new(Category::ArtifactInvalid, e.to_string()),
            AnalysisError::UnsupportedTask(_) => Self::config(e.to_string()),
            _ => Self::invariant(e.to_string()),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::InvalidK { .. } | IndexError::DimensionMismatch { .. } => Self::config(e.to_string()),
            _ => Self::invariant(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) | SynthError::InfeasibleRate { .. } => Self::config(e.to_string()),
            _ => Self::invariant(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::invariant(format!("i/o error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_body_names_category_and_code() {
        let e = CliError::missing(Path::new("run/cache.jsonl"));
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"]["category"], "artifact_missing");
        assert_eq!(v["error"]["exit_code"], 3);
        assert!(v["error"]["message"].as_str().unwrap().contains("run/cache.jsonl"));
    }

    #[test]
    fn reader_failures_exit_4() {
        let e: CliError = ReaderError::RemoteUnavailable("down".into()).into();
        assert_eq!(e.exit_code(), 4);
        let e: CliError = ReaderError::InvalidParams("alpha".into()).into();
        assert_eq!(e.exit_code(), 2);
    }
}
