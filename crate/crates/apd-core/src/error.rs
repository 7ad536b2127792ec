//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;

/// Failure modes of the numeric substrate and the decomposition engine.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes do not line up (matmul, forward, optimizer...).
    Shape {
        context: &'static str,
        detail: String,
    },
    /// An iterative routine ran out of its iteration budget.
    NoConvergence {
        context: &'static str,
        residual: f64,
    },
    /// A NaN or infinity appeared where a finite value is required.
    NonFinite {
        context: &'static str,
        detail: String,
    },
    /// An index was outside the valid range.
    OutOfRange {
        context: &'static str,
        index: usize,
        limit: usize,
    },
    /// A configuration value is invalid or inconsistent.
    Config {
        context: &'static str,
        detail: String,
    },
    /// A construction does not fit in the requested architecture.
    Capacity {
        context: &'static str,
        detail: String,
    },
    /// Training diverged; the caller gets the last finite step index.
    Divergence {
        step: usize,
        detail: String,
    },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { context, detail } => {
                write!(f, "shape error in {context}: {detail}")
            }
            CoreError::NoConvergence { context, residual } => {
                write!(f, "{context} did not converge (residual {residual:.3e})")
            }
            CoreError::NonFinite { context, detail } => {
                write!(f, "non-finite value in {context}: {detail}")
            }
            CoreError::OutOfRange {
                context,
                index,
                limit,
            } => write!(f, "index {index} out of range for {context} (limit {limit})"),
            CoreError::Config { context, detail } => {
                write!(f, "invalid configuration for {context}: {detail}")
            }
            CoreError::Capacity { context, detail } => {
                write!(f, "capacity error in {context}: {detail}")
            }
            CoreError::Divergence { step, detail } => {
                write!(f, "training diverged at step {step}: {detail}")
            }
        }
    }
}

impl core::error::Error for CoreError {}

/// Builds a [`CoreError::Shape`] with formatted detail.
#[macro_export]
macro_rules! shape_err {
    ($context:expr, $($arg:tt)*) => {
        $crate::CoreError::Shape {
            context: $context,
            detail: alloc::format!($($arg)*),
        }
    };
}
