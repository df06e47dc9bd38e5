use std::fmt;

/// Errors surfaced by the numeric core and the adaptation engine.
///
/// Shape and domain violations are programming or data errors and carry
/// enough context to locate the offending call site; `NonFiniteRun` is the
/// one runtime condition the engine can hit on healthy code (a diverged
/// update loop) and is meant to be handled, not just reported.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A numeric precondition on the data failed (unnormalized rows,
    /// out-of-range labels, empty inputs and the like).
    Domain { op: &'static str, msg: String },
    /// An oracle or probe evaluated to a non-finite value and cannot be
    /// trusted.
    Oracle { op: &'static str, msg: String },
    /// The adaptation loop produced non-finite losses repeatedly and was
    /// aborted. `step` is the batch index of the final failure.
    NonFiniteRun { step: usize, consecutive: usize },
    /// Input data could not be parsed. `line` is 1-based.
    Parse { line: usize, msg: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            CoreError::Domain { op, msg } => write!(f, "{op}: {msg}"),
            CoreError::Oracle { op, msg } => write!(f, "oracle {op}: {msg}"),
            CoreError::NonFiniteRun { step, consecutive } => write!(
                f,
                "adaptation aborted at batch {step} after {consecutive} consecutive non-finite losses"
            ),
            CoreError::Parse { line, msg } => write!(f, "line {line}: {msg}"),
        }
    }
}

impl std::error::Error for CoreError {}

pub type Result<T> = std::result::Result<T, CoreError>;
