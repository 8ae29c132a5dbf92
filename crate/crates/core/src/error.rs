use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// The input is too small (or empty) for the operation to be defined.
    #[error("degenerate input to {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A caller broke an API contract (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("training fault at step {step}: {detail}")]
    TrainingFault { step: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has version {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (file corrupted?)")]
    Checksum,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DegenerateInput {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
