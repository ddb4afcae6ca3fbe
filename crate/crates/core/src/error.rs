use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NonError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NonError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("schema hash mismatch: checkpoint was built for {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("missing artifact {path}: run `non {command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("all {trials} search trials failed: {summary}")]
    SearchFailed { trials: usize, summary: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },
}

impl NonError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NonError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        NonError::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// Whether the failure stems from user input (config, usage, missing
    /// prerequisites) rather than from a run going wrong.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            NonError::Config(_)
                | NonError::MissingArtifact { .. }
                | NonError::Parse { .. }
                | NonError::SchemaMismatch { .. }
        )
    }
}
