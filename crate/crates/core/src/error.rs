//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants mirror the failure classes of the
/// individual subsystems so callers can match on what went wrong.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar argument is outside its valid range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Model configuration is inconsistent with itself or with an input.
    #[error("config error: {0}")]
    Config(String),

    /// A weight or tensor container failed to parse or validate.
    #[error("format error: {0}")]
    Format(String),

    /// Positional structures do not match the reduced token sequence.
    #[error("positional adaptation error: {0}")]
    Adaptation(String),

    /// A token selection references patches that do not exist.
    #[error("selection error: {0}")]
    Selection(String),

    /// A caller violated an interface contract (e.g. non-normalized probabilities).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The toy trainer diverged.
    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// An error that occurred while processing one dataset sample.
    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach a sample identifier to an error propagating out of per-sample work.
    pub fn for_sample(self, id: impl Into<String>) -> Error {
        Error::Sample {
            id: id.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
