use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error in column `{column}`: {message}")]
    Format { column: String, message: String },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("cluster {cluster} too small for estimation: {n_treated} treated, {n_control} control (need {min} each)")]
    ClusterSize {
        cluster: usize,
        n_treated: usize,
        n_control: usize,
        min: usize,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(what: &str, expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        Error::Shape(format!("{what}: expected {expected}, got {got}"))
    }
}
