use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CakeError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("MNW solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("unknown mechanism `{0}`")]
    UnknownMechanism(String),
}

impl CakeError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        CakeError::Domain(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        CakeError::Invariant(msg.into())
    }

    pub fn is_solver_failure(&self) -> bool {
        matches!(self, CakeError::NotConverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, CakeError>;
