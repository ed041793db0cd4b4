use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AlpineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AlpineError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("AUC undefined: need at least one positive and one negative label ({positives} positives, {negatives} negatives)")]
    UndefinedAuc { positives: usize, negatives: usize },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Write(#[from] std::io::Error),
}

impl AlpineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AlpineError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AlpineError::Config(_) => 2,
            AlpineError::Numeric(_) => 4,
            _ => 3,
        }
    }
}
