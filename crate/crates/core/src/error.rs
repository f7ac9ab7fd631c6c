use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("rank mismatch: expected rank {expected}, found rank {found}")]
    RankMismatch { expected: usize, found: usize },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value violates one of its type invariants.
    #[error("{0}")]
    Invariant(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("round budget exhausted: round {round} requested but only {max} rounds are scheduled")]
    RoundBudgetExhausted { round: usize, max: usize },

    #[error("round order violation: {0}")]
    RoundOrder(String),

    #[error("no foreground evidence: every foreground prototype selection is empty")]
    NoForegroundEvidence,

    #[error("too few background pixels: found {found}, need at least {required}")]
    InsufficientBackground { found: usize, required: usize },

    #[error("could not place {requested} instances without overlap (placed {placed})")]
    Placement { placed: usize, requested: usize },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
