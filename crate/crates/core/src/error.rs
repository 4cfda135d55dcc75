use std::path::PathBuf;

use thiserror::Error;

use crate::solver::KktResiduals;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("unknown system `{name}`; valid names are: {}", valid.join(", "))]
    UnknownSystem {
        name: String,
        valid: Vec<&'static str>,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("trajectory diverged at t = {time:.6} (|x| = {norm:.3e})")]
    Divergence { time: f64, norm: f64 },

    #[error("solver stopped after {iterations} iterations without converging: {kkt}")]
    NotConverged {
        iterations: usize,
        kkt: KktResiduals,
    },

    #[error("program is infeasible: {certificate}")]
    Infeasible { certificate: String },

    #[error("regressor is rank deficient along {direction}")]
    RankDeficient { direction: String },

    #[error("linearization is not stabilizable: {0}")]
    Unstabilizable(String),

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("io error on {path}: {source}")]
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
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dimension(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
