use thiserror::Error;

/// Error type shared by all modules of this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Structural problems: shape mismatches, ids out of range, empty clusters.
    #[error("structural error: {0}")]
    Structure(String),

    /// A model fails the admissibility assumptions required by an operation.
    #[error("assumption violated: {0}")]
    Assumption(String),

    /// The user budget is too small for the requested operation.
    #[error("budget too small: {0}")]
    Budget(String),

    /// K-means seeding could not produce the requested number of clusters.
    #[error("seeding failed: {0}")]
    Seeding(String),

    /// Malformed input data (response logs, model documents).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Invalid experiment or replay configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
