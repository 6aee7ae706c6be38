use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} coefficients, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate noise: phi_{mode}(x) = {value:e} is below the underflow threshold")]
    DegenerateNoise { mode: usize, value: f64 },

    #[error("trajectory does not carry its noise increments")]
    MissingIncrements,

    #[error("time {time} is not on the trajectory grid (dt = {dt})")]
    OffGrid { time: f64, dt: f64 },

    #[error("blow-up at step {step}: state left the finite range")]
    BlowUp { step: usize },

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{} of {} runs censored by blow-up (limit {:.0}%)", .censored, .total, .limit * 100.0)]
    CensoringOverflow { censored: usize, total: usize, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
