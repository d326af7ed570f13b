use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input or configuration rejected before any work was done.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("training diverged at step {step}; last finite loss {last_finite_loss}")]
    Diverged { step: usize, last_finite_loss: f64 },

    #[error("class {class} has no examples of group {group}")]
    MissingGroup { class: usize, group: u8 },

    #[error("infeasible budget for class {class}, group {group}: need {needed}, have {available}")]
    Infeasible {
        class: usize,
        group: u8,
        needed: usize,
        available: usize,
    },

    #[error("missing checkpoint {0} (strict mode)")]
    MissingCheckpoint(PathBuf),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from rejected input rather than a failure
    /// while doing the work. Drives the CLI exit code.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Shape { .. }
                | Error::NonFinite(_)
                | Error::MissingGroup { .. }
                | Error::Infeasible { .. }
                | Error::Format { .. }
                | Error::Json(_)
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
