use thiserror::Error;

use crate::params::Variant;

#[derive(Debug, Error)]
pub enum Error {
    #[error("variant mismatch: expected {expected}, got {found}")]
    VariantMismatch { expected: Variant, found: Variant },

    #[error("dimension mismatch in {what}: expected {expected}, got {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("negative input rate {rate} for {input}")]
    NegativeInput { input: &'static str, rate: f64 },

    #[error("dose {amount} on day {day} exceeds the admissible maximum {max} for {medication}")]
    DoseOutOfRange {
        medication: &'static str,
        day: usize,
        amount: f64,
        max: f64,
    },

    #[error("integration failed at t = {t} s: step size underflow (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("integration failed at t = {t} s: non-finite state")]
    NonFiniteState { t: f64 },

    #[error("integration failed at t = {t} s: exceeded {max_steps} internal steps")]
    TooManySteps { t: f64, max_steps: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
