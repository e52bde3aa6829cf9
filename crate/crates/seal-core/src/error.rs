//! Error type shared across the toolkit.

use thiserror::Error;

/// All fallible toolkit operations return this error.
///
/// Variants are grouped so callers (notably the CLI) can map them onto
/// coarse categories: bad arguments/configuration, violated preconditions
/// on the model or data, and numeric failures.
#[derive(Debug, Error)]
pub enum SealError {
    /// Tensor or layer shapes are inconsistent.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A caller-supplied argument is malformed (bad ranges, bad enum
    /// values, inconsistent options).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The network does not satisfy a structural requirement of the
    /// requested operation (wrong layer kind, missing follow-up layer,
    /// index out of range, missing backup, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The trigger optimizer found no input with a usable detector
    /// response (|v . phi(x*)| below the degeneracy floor).
    #[error("degenerate trigger: |detector response| {response:e} is below {floor:e}")]
    DegenerateTrigger { response: f64, floor: f64 },

    /// An optimizer exhausted its iteration budget without reaching its
    /// target.
    #[error("optimization did not converge: {0}")]
    Convergence(String),

    /// A computation produced a non-finite or otherwise unusable value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A serialized artifact is malformed (bad magic, version mismatch,
    /// truncated payload, invalid manifest).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SealError>;

impl SealError {
    /// Coarse category used by the command-line frontend to pick an exit
    /// code: configuration problems, violated preconditions, or numeric
    /// failures.
    pub fn category(&self) -> ErrorCategory {
        match self {
            SealError::InvalidArgument(_) | SealError::Format(_) | SealError::Io(_) => {
                ErrorCategory::Config
            }
            SealError::ShapeMismatch(_) | SealError::Precondition(_) => ErrorCategory::Precondition,
            SealError::DegenerateTrigger { .. }
            | SealError::Convergence(_)
            | SealError::Numeric(_) => ErrorCategory::Numeric,
        }
    }
}

/// Coarse error category, primarily for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Precondition,
    Numeric,
}
