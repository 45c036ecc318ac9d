use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("injection-order error: site in block {block} but adapters start after block {start_block}")]
    InjectionOrder { block: usize, start_block: usize },
    #[error("injection-site error: {0}")]
    InjectionSite(String),
    #[error("state error: {0}")]
    State(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("incomplete accuracy matrix: missing a[{row}][{col}]")]
    IncompleteMatrix { row: usize, col: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("training failure: {0}")]
    TrainingFailure(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line driver.
    ///
    /// 2 validation, 3 invariant violation (including unmet training
    /// thresholds), 4 I/O and file-format problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Bounds(_) | Error::Index(_) => 2,
            Error::InvariantViolation(_) | Error::TrainingFailure(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            _ => 1,
        }
    }
}
