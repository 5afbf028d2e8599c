use thiserror::Error;

use crate::subset::IndexSet;

#[derive(Debug, Error)]
pub enum IgrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("column x{} has zero variance and cannot be normalized", .column + 1)]
    ZeroVariance { column: usize },

    #[error("singular submatrix on {subset} ({})", env_label(*.env))]
    Singular { subset: IndexSet, env: Option<usize> },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("subset enumeration over d = {d} exceeds the cap of {cap}")]
    CapExceeded { d: usize, cap: usize },

    #[error("weight undefined for x{}: every candidate subset is singular", .0 + 1)]
    UndefinedWeight(usize),

    #[error("coordinate descent stopped after {sweeps} sweeps with max change {last_change:e}")]
    NotConverged {
        sweeps: usize,
        last_change: f64,
        fit: Box<crate::solver::IgrFit>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn env_label(env: Option<usize>) -> String {
    match env {
        Some(e) => format!("environment {}", e + 1),
        None => "pooled".to_string(),
    }
}

impl IgrError {
    /// Failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IgrError::Singular { .. }
                | IgrError::NotPositiveDefinite(_)
                | IgrError::UndefinedWeight(_)
                | IgrError::NotConverged { .. }
        )
    }
}

pub type Result<T, E = IgrError> = std::result::Result<T, E>;
