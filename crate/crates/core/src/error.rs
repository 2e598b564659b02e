use std::path::PathBuf;

use nalgebra::DVector;

/// Errors raised by the solvers, generators and file plumbing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// The posterior precision could not be factored even after adding `ridge`
    /// to its diagonal.
    #[error("singular system: factorization failed after ridge {ridge:e}")]
    SingularSystem { ridge: f64 },

    /// Posterior covariance and coupled precision disagree (shrinkage factor
    /// outside `[0, 1]` beyond rounding).
    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("infeasible constraints: residual {residual:e}")]
    Infeasible { residual: f64 },

    #[error("inner solver did not converge in {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        last: DVector<f64>,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
