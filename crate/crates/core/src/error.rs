//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the manifold/meshing/connection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A numerical routine failed to converge within its iteration budget.
    #[error("no convergence in {what}: {detail}")]
    NoConvergence { what: &'static str, detail: String },

    /// An input value is outside the domain a routine can handle.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A cohomological divisor fell below the small-divisor threshold while
    /// solving an order of the invariance equation.
    #[error("small divisor |{divisor:.3e}| < {threshold:.1e} at order {order}, component {component}, monomial {monomial:?}")]
    SmallDivisor {
        divisor: f64,
        threshold: f64,
        order: usize,
        component: usize,
        monomial: [u32; 5],
    },

    /// Orbit propagation left the admissible region (e.g. hit the Moon
    /// guard sphere) where the caller required a clean trajectory.
    #[error("propagation stopped: {0}")]
    PropagationStopped(String),

    /// File or format problem in the plain-text artifact I/O.
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<std::num::ParseFloatError> for Error {
    fn from(e: std::num::ParseFloatError) -> Self {
        Error::Io(format!("bad float: {e}"))
    }
}

impl From<std::num::ParseIntError> for Error {
    fn from(e: std::num::ParseIntError) -> Self {
        Error::Io(format!("bad integer: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
