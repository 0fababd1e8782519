use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DactError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DactError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("malformed input at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("corpus is empty after filtering")]
    EmptyCorpus,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {term} = {value}")]
    Divergence { step: usize, term: String, value: f64 },

    #[error("missing entry: {0}")]
    Missing(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<DactError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error("image encoding failed: {0}")]
    Image(String),
}

impl DactError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DactError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        DactError::Config(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        DactError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DactError::Dimension { expected, got })
    }
}
