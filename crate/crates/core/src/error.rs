use thiserror::Error;

/// Errors raised by the filtering library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("blended precision is not positive definite; the alpha integral diverges")]
    BlendNotPositiveDefinite,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("natural-gradient step rejected after {halvings} halvings")]
    StepFailed { halvings: usize },

    #[error("importance weights degenerate (effective sample size {ess:.2})")]
    DegenerateWeights { ess: f64 },

    #[error("all particle weights are zero or non-finite")]
    AllWeightsZero,

    #[error("ensemble innovation covariance is singular")]
    SingularEnsemble,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(FilterError::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
