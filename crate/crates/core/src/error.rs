use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file: bad `{field}`: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("unsupported payload: {0}")]
    UnsupportedDtype(String),

    #[error("corrupt artifact: {0}")]
    Corruption(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid assignment: {0}")]
    Assignment(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate calibration: activations are all zero, damping would be 0")]
    DegenerateCalibration,

    #[error("exhaustive oracle too large: {combos} codes exceed cap {cap}")]
    OracleTooLarge { combos: f64, cap: u64 },

    #[error("numerical divergence in {stage} at {position}: loss = {loss}")]
    Divergence {
        stage: &'static str,
        position: String,
        loss: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn format(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
