use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the gradient atoms pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file does not start with the expected magic tag.
    #[error("format error: {0}")]
    Format(String),

    /// The file is shorter than its header claims.
    #[error("corrupt file: {0}")]
    Corruption(String),

    /// Metadata JSON could not be parsed or is missing required fields.
    #[error("metadata parse error: {0}")]
    Parse(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Module registry invariants (offsets, sizes, names) do not hold.
    #[error("layout error: {0}")]
    Layout(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),

    #[error("payload kind mismatch: expected {expected}, found {found}")]
    Kind { expected: String, found: String },

    #[error("registry mismatch: {0}")]
    Registry(String),

    #[error("token {0} is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),
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
