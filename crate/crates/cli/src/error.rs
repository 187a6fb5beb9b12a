use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("missing artifact {0}")]
    Missing(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0} exists; another process is writing this output")]
    Locked(String),
    #[error(transparent)]
    Sim(#[from] pathprune::SimError),
    #[error(transparent)]
    Filter(#[from] pathprune::FilterError),
    #[error(transparent)]
    Prune(#[from] pathprune::PruneError),
    #[error(transparent)]
    Search(#[from] pathprune::SearchError),
    #[error(transparent)]
    Space(#[from] pathprune::SpaceError),
    #[error(transparent)]
    Cost(#[from] pathprune::CostError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Parse(_) => "parse",
            CliError::Missing(_) => "missing_artifact",
            CliError::Mismatch(_) => "artifact_mismatch",
            CliError::Locked(_) => "locked",
            CliError::Filter(pathprune::FilterError::VocabMismatch) => "artifact_mismatch",
            CliError::Sim(_) => "pipeline",
            CliError::Filter(_) => "filter",
            CliError::Prune(_) => "prune",
            CliError::Search(_) => "search",
            CliError::Space(_) => "space",
            CliError::Cost(_) => "cost",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}
