use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    Singular { pivot: usize, value: f64 },

    #[error("simulation blew up at step {step} (state norm {norm:e})")]
    BlowUp { step: usize, norm: f64 },

    #[error("filter covariance unstable at step {step}: min eigenvalue {min_eig:e}")]
    Instability { step: usize, min_eig: f64 },

    #[error("ensemble collapsed at step {step}: covariance trace {trace:e}")]
    DegenerateEnsemble { step: usize, trace: f64 },

    #[error("degenerate metric: column {column} has zero standard deviation")]
    DegenerateMetric { column: usize },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("ill-posed regression library: condition number {condition:e}")]
    IllPosedLibrary { condition: f64 },

    #[error("training diverged at epoch {epoch}: total loss {loss:e}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("tape error: {0}")]
    Tape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::IllPosedLibrary { .. } => 2,
            Error::MissingArtifact(_) => 4,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 4,
            Error::Io(_) | Error::Json(_) => 2,
            _ => 3,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}
