use thiserror::Error;

/// Errors raised while configuring or running the safe MPC pipeline.
///
/// Solver outcomes such as infeasibility are reported through status enums,
/// not through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown preset `{name}` (valid presets: {valid})")]
    UnknownPreset { name: String, valid: String },

    #[error("(A, B) is not stabilizable: Riccati iteration did not converge after {0} iterations")]
    NotStabilizable(usize),

    #[error("constraint set has empty interior: row {row} has offset {offset}")]
    EmptyInterior { row: usize, offset: f64 },

    #[error("linear program failed: {0}")]
    Solver(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
