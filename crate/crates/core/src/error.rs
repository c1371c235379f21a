use std::fmt;

use thiserror::Error;

/// A single violated model invariant, carrying a stable machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub code: &'static str,
    pub message: String,
}

impl ValidationIssue {
    pub(crate) fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.message, self.code)
    }
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum QapError {
    #[error("invalid model: {}", join_issues(.0))]
    Validation(Vec<ValidationIssue>),

    #[error("input error: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Finite-time blow-up of the coefficient flow (Riccati singularity).
    #[error("coefficient blow-up at t = {time:.6} (caustic)")]
    Singularity { time: f64 },

    /// Closed-form classical action is undefined (sin ωT = 0).
    #[error("caustic: {0}")]
    Caustic(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("no guess converged (best gradient norm {best_grad_norm:.3e})")]
    NonConvergence { best_grad_norm: f64 },

    #[error("bracket error: {0}")]
    Bracket(String),

    #[error("ambiguous root: sign changes in {intervals:?}")]
    Ambiguous { intervals: Vec<(f64, f64)> },

    #[error("finite-difference step error: estimates {coarse:.9e} and {fine:.9e} disagree")]
    StepSize { coarse: f64, fine: f64 },

    #[error("domain too small: |psi| at the boundary reached {edge:.3e} at t = {time:.6}")]
    DomainTooSmall { edge: f64, time: f64 },
}

impl QapError {
    /// True for failures of the numerics (caustics, non-convergence) as opposed
    /// to malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            QapError::Singularity { .. }
                | QapError::Caustic(_)
                | QapError::NonConvergence { .. }
                | QapError::Bracket(_)
                | QapError::Ambiguous { .. }
                | QapError::StepSize { .. }
                | QapError::DomainTooSmall { .. }
                | QapError::Evaluation(_)
        )
    }
}

pub type Result<T, E = QapError> = std::result::Result<T, E>;
