use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("numeric overflow at node {node} ({op}): non-finite value produced")]
    NonFinite { node: usize, op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("operation {op} at node {node} is not differentiable")]
    UnsupportedOp { node: usize, op: &'static str },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fatal run error: {0}")]
    Fatal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: usize, op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            node,
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end: 2 for bad input or
    /// configuration, 3 for failures that happen while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_)
            | Error::Format { .. }
            | Error::Config(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Usage(_) => 2,
            _ => 3,
        }
    }
}
