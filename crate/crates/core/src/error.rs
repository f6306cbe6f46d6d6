use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {t} outside the range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("{context}: norm drift {drift:.3e} at t = {t}")]
    NormDrift { context: &'static str, t: f64, drift: f64 },

    #[error("event bracketing failed: {0}")]
    Bracketing(String),

    #[error("unitary eigenphase {phase} lies on the logarithm branch cut")]
    LogBranchAmbiguity { phase: f64 },

    #[error("register layout mismatch: expected dimension {expected}, found {found}")]
    LayoutMismatch { expected: usize, found: usize },

    #[error("register overflow at t = {t}: weight {leaked:.3e} in the top occupation shell")]
    RegisterOverflow { t: f64, leaked: f64 },

    #[error("state has numerically zero norm")]
    ZeroState,

    #[error("basis size {size} exceeds the limit {limit}")]
    BasisTooLarge { size: usize, limit: usize },

    #[error("unnormalized probability ladder: total weight {total}")]
    UnnormalizedLadder { total: f64 },

    #[error("schedule format error at line {line}: {reason}")]
    ScheduleFormat { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
