use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the named primitive.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A caller broke an API contract (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// An index (class, label, client) is out of range.
    #[error("out of domain: {0}")]
    Domain(String),

    #[error("training diverged on client {client} at iteration {iteration}: loss = {loss}")]
    Divergence { client: usize, iteration: usize, loss: f64 },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Every violated invariant of a plan, one entry each.
    #[error("plan validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("malformed record: {0}")]
    Record(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. } | Error::Validation(_))
    }
}
