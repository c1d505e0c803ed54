use std::path::PathBuf;

/// Errors produced anywhere in the design pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("batch of {got} rows is too small for {op} (need at least {need})")]
    BatchSize {
        op: &'static str,
        got: usize,
        need: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {what}")]
    Numeric { what: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    /// `last_finite` is empty when no point of the run had a finite energy.
    #[error("energy became non-finite at step {step}")]
    NonFiniteEnergy { step: usize, last_finite: Vec<f64> },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("index {index} out of range (len {len}) for {what}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint {}: {message}", .path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Short stable identifier used in machine-parseable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::BatchSize { .. } => "batch-size",
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::NonFiniteEnergy { .. } => "non-finite-energy",
            Error::Usage(_) => "usage",
            Error::Parse { .. } => "parse",
            Error::Data(_) => "data",
            Error::Index { .. } => "index",
            Error::MissingFile(_) => "missing-file",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
