use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value failed validation. `field` is a dotted path into the
    /// experiment config (e.g. `distribution.q`).
    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// The 2x2 moment system at `coord` has determinant below the tolerance, so the
    /// distribution is not moment invertible there and the non-MIP path is required.
    #[error(
        "moment system singular at coordinate {coord}: kappa = {kappa}, phi = {phi}, \
         |phi - 1 - kappa^2| = {det:e} (use the non-MIP mode)"
    )]
    MomentSystemSingular {
        coord: usize,
        kappa: f64,
        phi: f64,
        det: f64,
    },

    #[error("batch stream exhausted before {0}")]
    StreamExhausted(&'static str),

    #[error("dense verification limited to d <= {max}, got d = {d}")]
    DenseLimit { d: usize, max: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
