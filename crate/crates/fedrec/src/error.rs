//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI exit-code classes: validation-style failures
//! exit 1, runtime divergence exits 2, and I/O trouble exits 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed text input, reported with its origin line.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Structurally invalid data or configuration.
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation needed a positive degree on a node that has none.
    #[error("degenerate node: {0}")]
    DegenerateNode(String),

    /// Vector or matrix shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value left the representable fixed-point range.
    #[error("range error: {0}")]
    Range(String),

    /// A protocol role received an inconsistent or incomplete message.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite quantity; the run is aborted.
    #[error("divergence at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    /// A numeric quantity became non-finite outside any epoch context;
    /// callers that know the epoch rewrap this as [`Error::Divergence`].
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Evaluation was requested on a state with nothing to evaluate.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A checkpoint file is unreadable or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit-code class for the CLI: 1 validation, 2 divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NonFinite(_) => 2,
            Error::Io(_) | Error::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}
