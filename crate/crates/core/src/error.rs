use thiserror::Error;

use crate::feynman::CausticClass;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("incompatible grids: {0}")]
    GridMismatch(String),

    #[error("near-singular system ({context}): condition estimate {condition:.3e}")]
    NearSingular { context: String, condition: f64 },

    #[error("caustic at kt = {kt}: {class:?} (distance {distance:.3e})")]
    Caustic {
        kt: f64,
        class: CausticClass,
        distance: f64,
    },

    #[error("singular factor in the master formula: {0}")]
    SingularFactor(String),

    #[error("Gram matrix condition violated: {0}")]
    ConditionViolation(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::Config(_) | Error::GridMismatch(_) => 2,
            Error::NearSingular { .. } | Error::NumericFailure(_) | Error::ConditionViolation(_) => 3,
            Error::Caustic { .. } | Error::SingularFactor(_) => 4,
        }
    }
}
