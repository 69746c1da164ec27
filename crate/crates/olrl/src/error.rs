use thiserror::Error;

/// Crate-wide error type.
///
/// Numeric failures carry the time step they occurred at so long runs can
/// report where a sequence blew up.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {why}")]
    InvalidArgument { what: &'static str, why: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rollout diverged at step {step}: non-finite state or reward")]
    DivergedRollout { step: usize },

    #[error("finite-difference probe diverged: non-finite dynamics output")]
    DivergedProbe,

    #[error("non-finite costate at step {t}")]
    NonFiniteCostate { t: usize },

    #[error("non-finite gradient for action index {t}")]
    NonFiniteGradient { t: usize },

    #[error("jacobian provider failed at step {t}: {source}")]
    Provider {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("model training diverged: {0}")]
    TrainingDiverged(String),

    #[error("model io: {0}")]
    ModelIo(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::InvalidArgument { what, why: why.into() }
    }

    pub fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
