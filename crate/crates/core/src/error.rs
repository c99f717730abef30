use thiserror::Error;

/// Errors raised by the fitting and basis machinery.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FmeError {
    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("t = {t} lies outside the basis domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("identifiability constraint violated: {0}")]
    Identifiability(String),

    #[error("degenerate derivative matrix: {0}")]
    DegenerateDerivative(String),

    #[error("empty component: {0}")]
    EmptyComponent(String),

    #[error("Newton-Raphson gating update failed: {0}")]
    NrFailure(String),

    #[error("numeric underflow: {0}")]
    Underflow(String),

    #[error("gating update failed: {0}")]
    GatingUpdate(String),

    #[error("all {starts} EM restarts failed (last error: {last})")]
    FitFailure { starts: usize, last: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("model selection failed: {0}")]
    Selection(String),
}

impl FmeError {
    /// True for failures caused by the numerics of a fit rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FmeError::DegenerateDerivative(_)
                | FmeError::EmptyComponent(_)
                | FmeError::NrFailure(_)
                | FmeError::Underflow(_)
                | FmeError::GatingUpdate(_)
                | FmeError::FitFailure { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, FmeError>;
