use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid record: {0}")]
    Validation(String),

    #[error("referential integrity: {0}")]
    ReferentialIntegrity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every bin fell below the occupancy threshold.
    #[error("no bins retained after dropping bins with fewer than {min_samples} samples; occupied bins: {histogram}")]
    EmptyMetric { min_samples: usize, histogram: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("model has not been fitted")]
    NotFitted,

    #[error("degenerate fit: training data needs both matched and unmatched samples ({positives} positive, {negatives} negative)")]
    DegenerateLabels { positives: usize, negatives: usize },

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e}, last iterate {iterate:?})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        iterate: Vec<f64>,
    },

    #[error("numerical failure: {message} (iterate {iterate:?})")]
    Numerical { message: String, iterate: Vec<f64> },

    #[error("model schema: {0}")]
    Schema(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error("dimensionality: {0}")]
    Dimensionality(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical core, as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonConvergence { .. } | Error::Numerical { .. })
    }
}
