use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library. Variants carry enough context
/// (field names, 1-based rows and line numbers) to point at the culprit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {field}: {detail}")]
    DimensionMismatch { field: &'static str, detail: String },

    #[error("{field} is not stochastic (row {row})")]
    NotStochastic { field: &'static str, row: usize },

    #[error("non-positive hyperparameter in {0}")]
    NonPositiveHyperparam(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what} index {index} out of range 1..={bound}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-positive gap time {0}")]
    NonPositiveGap(f64),

    #[error("invalid event sequence {id}: {detail}")]
    InvalidSequence { id: String, detail: String },

    #[error("forward-backward underflow at event {step} of examinee {id}")]
    Underflow { id: String, step: usize },

    #[error("all {0} restarts failed")]
    AllRestartsFailed(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("simulated sequence exceeded {0} events")]
    RunawaySequence(usize),

    #[error("invalid emission block: {0}")]
    InvalidBlock(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bootstrap unstable: only {succeeded} of {total} replicates succeeded")]
    BootstrapUnstable { succeeded: usize, total: usize },

    #[error("malformed row at line {line}: {detail}")]
    MalformedRow { line: usize, detail: String },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("event order contradicts timestamps for examinee {0}")]
    NonMonotoneTime(String),

    #[error("no events survive cleaning for examinee {0}")]
    EmptySequence(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
