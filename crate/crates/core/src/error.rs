use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch: expected length {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("boundary vertices {0:?} are not adjacent to any interior vertex")]
    DisconnectedFromInterior(Vec<usize>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("eigensolver did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },

    #[error("divergent functional: {0}")]
    Divergence(String),

    #[error("no active vertex: |Γf| vanishes on every corpus entry")]
    NoActiveVertex,

    #[error("exact enumeration supports at most {max} members (got {got}); use monte-carlo mode")]
    TooManyForExact { got: usize, max: usize },

    #[error("Hölder triple invalid: 1/p0 + 1/p1 = {lhs} but 2/p = {rhs}")]
    HolderTriple { lhs: f64, rhs: f64 },

    #[error("no admissible corpus entry (every entry lies in ker L)")]
    NoAdmissibleEntry,

    #[error("refused: {0}")]
    Refused(String),

    #[error("malformed input: {0}")]
    Input(String),
}

impl LabError {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
