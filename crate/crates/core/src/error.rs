use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate shape matrix: {0}")]
    DegenerateShape(String),

    #[error("degenerate operand: {0}")]
    DegenerateOperand(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("GP fit failed: {0}")]
    Fit(String),

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("safe set construction failed: {0}")]
    SafeSet(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            expected,
            got,
            context,
        });
    }
    Ok(())
}
