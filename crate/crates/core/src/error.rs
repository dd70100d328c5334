use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite state")]
    NonFiniteState,
    #[error("non-finite state at step {step}")]
    NonFiniteAt { step: usize },
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("policy has no sampler")]
    NoSampler,
    #[error("closed loop is not differentiable at this state: {0}")]
    NonSmooth(String),
    #[error("degenerate perturbation set (vector {index} has norm {norm:e})")]
    DegeneratePerturbation { index: usize, norm: f64 },
    #[error("non-finite loss at update {update}: {detail}")]
    NonFiniteLoss { update: usize, detail: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("parameter count mismatch: expected {expected}, found {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration and input problems, as opposed to numerical failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::ParamCount { .. }
                | Error::Io { .. }
                | Error::InvalidArgument(_)
                | Error::Dimension { .. }
                | Error::NoSampler
        )
    }
}
