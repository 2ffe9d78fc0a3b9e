use thiserror::Error;

/// Errors produced by the predictive coding engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcnError {
    #[error("matrix has a zero dimension ({rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("matrix is singular")]
    Singular,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("activation {0} is not invertible")]
    NonInvertibleActivation(&'static str),

    #[error("value {value} is outside the domain of the inverse {activation}")]
    Domain { activation: &'static str, value: f64 },

    #[error("invalid network specification: {0}")]
    InvalidSpec(String),

    #[error("invalid settings: {0}")]
    InvalidSettings(String),

    #[error("clamped {0} layer has no vector supplied")]
    MissingClamp(&'static str),

    #[error("inference diverged at step {step}")]
    Divergence { step: usize },

    #[error("iteration did not converge after {iterations} sweeps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),

    #[error("unknown probe '{0}'")]
    UnknownProbe(String),

    #[error("missing reference for probe '{0}'")]
    MissingReference(String),

    #[error("idx format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PcnError {
    fn from(e: std::io::Error) -> Self {
        PcnError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PcnError>;
