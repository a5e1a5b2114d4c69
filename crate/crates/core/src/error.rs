use alloc::string::String;

/// Errors reported by the sampling core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{what} is undefined at t = {t}")]
    ScheduleDomain { what: &'static str, t: f64 },
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("state contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("integrator exhausted {max_steps} steps; reached t = {reached}")]
    Tolerance { reached: f64, max_steps: usize },
    #[error("all particle weights vanish")]
    DegenerateEnsemble,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incompatible configuration: {0}")]
    Incompatible(String),
    #[error("{0} is undefined for this input")]
    Undefined(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
