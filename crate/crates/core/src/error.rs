use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record line could not be decoded. `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("record {id} has an empty answer and no pooled override")]
    EmptyAnswer { id: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A value fell outside the fixed-point clip range.
    #[error("range error: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 1,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::Integrity(_)
            | Error::EmptyAnswer { .. }
            | Error::Calibration(_)
            | Error::Metric(_)
            | Error::Evaluation(_)
            | Error::Json(_) => 2,
            Error::Singular(_) | Error::Range(_) | Error::Configuration(_) => 3,
        }
    }
}
