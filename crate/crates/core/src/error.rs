use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so the CLI can map them onto exit codes:
/// configuration/usage, data/schema, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph has no pair of nodes closer than the threshold {threshold_km} km")]
    IsolatedGraph { threshold_km: f64 },
    #[error("nodes {i} and {j} coincide; edge direction undefined")]
    CoincidentNodes { i: usize, j: usize },
    #[error("CFL condition violated: {0}")]
    Cfl(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Diverged { epoch: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures rooted in numerics rather than input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::Cfl(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
