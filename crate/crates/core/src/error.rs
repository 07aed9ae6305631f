use std::fmt;

use serde::Serialize;

/// Library error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0}")]
    Divergence(Box<DivergenceReport>),

    #[error("{0}")]
    Solver(Box<SolverFailure>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}

/// Raised when a training run produces a non-finite loss or parameter.
#[derive(Clone, Debug, Serialize)]
pub struct DivergenceReport {
    pub step: u64,
    pub reason: String,
    /// Last step whose parameters were all finite.
    pub last_finite_step: u64,
    pub last_finite_params: Vec<f64>,
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run diverged at step {} ({}); last finite snapshot at step {}",
            self.step, self.reason, self.last_finite_step
        )
    }
}

/// Raised by the potential solver when neither Newton nor the first-order
/// fallback reaches the requested residual.
#[derive(Clone, Debug, Serialize)]
pub struct SolverFailure {
    pub reason: String,
    pub iterations: usize,
    pub feasibility_residual: f64,
    pub last_beta: Vec<f64>,
}

impl fmt::Display for SolverFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "potential solver failed after {} iterations: {} (residual {:e})",
            self.iterations, self.reason, self.feasibility_residual
        )
    }
}
