//! Error type shared by all modules.

use std::fmt;

/// Library result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Error conditions raised by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input violated a structural or numerical precondition.
    Validation(String),
    /// Vector/matrix sizes do not agree with the scenario dimensions.
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A requested operating point cannot be met (e.g. system load above the
    /// admissible bound of a power-control equation).
    Infeasible(String),
    /// An iterative solver exhausted its iteration budget.
    NoConvergence {
        context: &'static str,
        iterations: usize,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Dimension {
                context,
                expected,
                actual,
            } => write!(
                f,
                "dimension mismatch in {context}: expected {expected}, got {actual}"
            ),
            Error::Infeasible(msg) => write!(f, "infeasible configuration: {msg}"),
            Error::NoConvergence {
                context,
                iterations,
            } => write!(f, "{context} did not converge within {iterations} iterations"),
        }
    }
}

impl std::error::Error for Error {}
