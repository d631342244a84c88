use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported case: {0}")]
    Unsupported(String),

    #[error("seller index {index} out of range for {n} sellers")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Adaptive step collapsed below 1e-14. The field has a globally bounded
    /// derivative, so this points at a bug rather than genuine stiffness.
    #[error("step size underflow at t = {t}: h = {h:e}")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("enumeration for n = {0} sellers would produce 2^n - 1 points; limit is n <= 25")]
    CombinatorialExplosion(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
