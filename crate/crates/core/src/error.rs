use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("row {row}, feature \"{feature}\": {message}")]
    Cell {
        row: usize,
        feature: String,
        message: String,
    },
    #[error("table: {0}")]
    Table(String),
    #[error("model: {0}")]
    Model(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("undecodable one-hot group for feature \"{feature}\" in row {row}")]
    Undecodable { row: usize, feature: String },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("exact Shapley enumeration limited to {limit} features, got {features}; use shapley_sample")]
    ExactLimit { features: usize, limit: usize },
    #[error("matching: {0}")]
    Matching(String),
    #[error("incompatible reports: {0}")]
    IncompatibleReports(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
