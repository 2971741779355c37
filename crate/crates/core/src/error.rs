use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes, indices or handles that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A dense allocation would exceed the configured cap.
    #[error("resource limit: {what} needs {requested}, cap is {cap}")]
    Resource {
        what: &'static str,
        requested: usize,
        cap: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("factorization failed at regularizer {reg:e}; retry with a larger regularizer")]
    Factorization { reg: f64 },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("degenerate eigenvalue {index}: gap {gap:e} below threshold {threshold:e}")]
    DegenerateEigenvalue {
        index: usize,
        gap: f64,
        threshold: f64,
    },

    /// A failure inside a benchmark scenario.
    #[error("{scenario} scenario: {source}")]
    Scenario {
        scenario: &'static str,
        source: alloc::boxed::Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}

macro_rules! structural {
    ($($arg:tt)*) => {
        $crate::error::Error::Structural(alloc::format!($($arg)*))
    };
}

pub(crate) use invalid;
pub(crate) use structural;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
