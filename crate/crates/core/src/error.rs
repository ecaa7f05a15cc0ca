use thiserror::Error;

/// Errors raised by simulation, differentiation and analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LentError {
    #[error("truncated Lévy measure has zero mass above the cutoff {truncation}")]
    TruncatedMassZero { truncation: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),

    #[error("SDE state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("flow Jacobian is singular at step {step} (condition number {condition:e})")]
    SingularJacobian { step: usize, condition: f64 },

    #[error("coefficients do not vanish at zero (|A(0,0)| + |B(0,0)| = {magnitude:e})")]
    CoefficientNotVanishing { magnitude: f64 },

    #[error("KDE bandwidth must be positive, got {0}")]
    BandwidthNonPositive(f64),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("mark type not supported by mark space `{space}`")]
    MarkMismatch { space: String },

    #[error("invalid process specification: {0}")]
    InvalidSpec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        source: Box<LentError>,
    },
}

pub type Result<T> = std::result::Result<T, LentError>;

impl From<std::io::Error> for LentError {
    fn from(err: std::io::Error) -> Self {
        LentError::Io(err.to_string())
    }
}

impl From<serde_json::Error> for LentError {
    fn from(err: serde_json::Error) -> Self {
        LentError::Config(err.to_string())
    }
}

impl From<csv::Error> for LentError {
    fn from(err: csv::Error) -> Self {
        LentError::Io(err.to_string())
    }
}

impl LentError {
    pub fn context(self, context: impl Into<String>) -> Self {
        LentError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context removed.
    pub fn root(&self) -> &LentError {
        match self {
            LentError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LentError::NonFiniteValue(what.to_string()))
    }
}
