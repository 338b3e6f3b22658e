use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on a dimension.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A parameter or matrix violates its declared invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Euler-Maruyama produced a non-finite state.
    #[error("integration blow-up at t = {t}: state {state:?}")]
    IntegrationBlowup { t: f64, state: Vec<f64> },

    /// The Riccati solution stopped being positive definite.
    #[error("filter divergence at t = {t}: covariance lost positive definiteness")]
    FilterDivergence { t: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
