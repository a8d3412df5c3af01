use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum LateError {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("non-numeric cell at data row {row}, column `{column}`: {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing value at data row {row}, column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("column `{column}` must be 0/1 but row {row} holds {value}")]
    NonBinary {
        column: String,
        row: usize,
        value: f64,
    },
    #[error("no data rows")]
    EmptyData,
    #[error("covariate name `{0}` is reserved")]
    ReservedName(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("probability at index {index} is {value}, outside (0, 1)")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("singular Hessian: covariate matrix is rank deficient")]
    SingularHessian,
    #[error("singular Jacobian in covariate balancing equations")]
    SingularJacobian,
    #[error("no convergence after {iterations} iterations (moment sup-norm {last_norm:e})")]
    NoConvergence { iterations: usize, last_norm: f64 },
    #[error("perfect separation detected (|linear index| reached {max_abs_eta:.1})")]
    SeparationDetected { max_abs_eta: f64 },
    #[error("fitted probabilities left the admissible range (min {min_p:e}, max {max_p:e})")]
    DivergedProbabilities { min_p: f64, max_p: f64 },

    #[error("denominator `{which}` is numerically zero ({value:e})")]
    ZeroDenominator { which: &'static str, value: f64 },
    #[error("method mismatch: {0}")]
    MethodMismatch(String),
    #[error("singular design matrix in linear IV")]
    SingularDesign,
    #[error("moment Jacobian is singular (reciprocal condition {rcond:e})")]
    SingularA { rcond: f64 },

    #[error("unknown design `{0}`; valid designs are A1, A2, B, C, D")]
    UnknownDesign(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LateError {
    /// True for failures of an iterative solver or a numerically degenerate
    /// fit, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            LateError::SingularHessian
                | LateError::SingularJacobian
                | LateError::NoConvergence { .. }
                | LateError::SeparationDetected { .. }
                | LateError::DivergedProbabilities { .. }
                | LateError::SingularA { .. }
                | LateError::SingularDesign
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LateError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LateError>;
