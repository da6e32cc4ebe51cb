use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u64 },

    #[error("at least two classes are required, found {0}")]
    InsufficientClasses(usize),

    #[error("training diverged{}: {reason}", epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    Divergence { epoch: Option<usize>, reason: String },

    #[error("scorer fit failed: {0}")]
    Fit(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
