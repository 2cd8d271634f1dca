use thiserror::Error;

/// Errors raised by the estimation and verification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("basis too large: N = {size} exceeds the limit of {limit}")]
    BasisTooLarge { size: usize, limit: usize },

    #[error("factorial of a multi-index of order {0} overflows (order must be <= 20)")]
    FactorialOverflow(u32),

    #[error("insufficient local data: {found} active observations, need at least {required}")]
    InsufficientLocalData { found: usize, required: usize },

    #[error("singular local design: rank {rank} < {size}")]
    SingularDesign { rank: usize, size: usize },

    #[error("moment matrix is singular or not positive definite (condition number {condition:.3e})")]
    SingularSnp { condition: f64 },

    #[error("non-stationary configuration: |Y| reached {magnitude:.3e} at step {step}")]
    NonStationaryConfig { step: usize, magnitude: f64 },

    #[error("incompatible error model: {0}")]
    IncompatibleErrorModel(String),

    #[error("no analytic oracle available: {0}")]
    OracleUnavailable(String),

    #[error("too many local fit failures: {failures} of {total}")]
    TooManyLocalFailures { failures: usize, total: usize },

    #[error("degenerate rate fit: median sup-remainder {median:.3e} below 1e-10 at n = {n}")]
    DegenerateFit { n: usize, median: f64 },

    #[error("study aborted: {failures} of {total} replications failed")]
    StudyAborted { failures: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
