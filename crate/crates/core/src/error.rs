use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("inline refused: {0}")]
    RefusedInline(String),

    #[error("model invariant violated: {0}")]
    Invariant(String),

    #[error("measurement protocol error: {0}")]
    Protocol(String),

    #[error("undefined profile: {0}")]
    UndefinedProfile(String),

    #[error("division guard: {0}")]
    DivisionGuard(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    #[error("train/test overlap: {0}")]
    Overlap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Checks a `schema` tag read from an artifact.
pub(crate) fn expect_schema(expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Schema {
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}
