use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HambitError>;

#[derive(Debug, Error)]
pub enum HambitError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("CFL condition violated: dt = {dt} exceeds dx = {dx}")]
    CflViolation { dt: f64, dx: f64 },

    #[error("kernel evaluated with s = {s} > t = {t}")]
    TimeOrder { t: f64, s: f64 },

    #[error("finite difference grid exhausted after {steps} steps")]
    GridExhausted { steps: usize },

    #[error("truncation level {level} for {space} exceeds dimension {dim}")]
    TruncationExceedsDim {
        space: &'static str,
        level: usize,
        dim: usize,
    },

    #[error("unsupported kernel variant for {operation}: {variant}")]
    UnsupportedKernel {
        operation: &'static str,
        variant: String,
    },

    #[error("kernel component {component} does not decay; stationary covariance is infinite")]
    NonDecayingKernel { component: usize },

    #[error("Gram matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularGram { condition: f64 },

    #[error("volatility and noise share a seed stream; characteristic functional requires independence")]
    SharedSeed,

    #[error("need at least {needed} usable levels, found {found}")]
    InsufficientLevels { needed: usize, found: usize },

    #[error("time {value} is not on the simulation grid")]
    NotOnGrid { value: f64 },

    #[error("I/O failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV in {}: {reason}", path.display())]
    Csv { path: PathBuf, reason: String },
}

impl HambitError {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        HambitError::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        HambitError::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
