use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CpcError>;

#[derive(Debug, Error)]
pub enum CpcError {
    /// Shapes of two operands disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("zero-norm embedding in cosine similarity")]
    ZeroNorm,

    #[error("could not parse partition: {0}")]
    Parse(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("fixture underrun: no `{0}` responses left")]
    FixtureUnderrun(String),

    /// Network or transport failure; the request may be retried.
    #[error("llm request failed (retriable): {0}")]
    Transport(String),

    #[error("forward cache does not match the current parameters")]
    StaleCache,

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at step {step} (sample `{sample}`)")]
    Diverged { step: usize, sample: String },
}

impl CpcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CpcError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CpcError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures of arithmetic rather than of inputs or the environment.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CpcError::NonFinite(_) | CpcError::ZeroNorm | CpcError::Diverged { .. }
        )
    }
}
