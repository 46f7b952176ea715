use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("id {id} out of range for vocabulary of size {limit}")]
    Range { id: usize, limit: usize },

    #[error("frame {frame} exceeds horizon of {limit} frames")]
    Horizon { frame: usize, limit: usize },

    #[error("degenerate partition: {0}")]
    DegeneratePartition(&'static str),

    #[error("invalid interval [{start}, {end})")]
    InvalidInterval { start: f64, end: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite value in {what}{}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    Numeric {
        what: &'static str,
        frame: Option<usize>,
    },

    #[error("training step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("group size {0} is too small, need at least 2")]
    GroupSize(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// The innermost error, looking through step annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn numeric(what: &'static str, frame: Option<usize>) -> Self {
        Error::Numeric { what, frame }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
