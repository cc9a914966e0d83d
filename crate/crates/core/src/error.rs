use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: unexpected header, expected `{expected}`")]
    Header { path: PathBuf, expected: String },
    #[error("duplicate pid {0}")]
    DuplicatePid(u64),
    #[error("duplicate uid `{0}`")]
    DuplicateUid(String),
    #[error("negative counter `{field}` for uid `{uid}`")]
    NegativeCounter { uid: String, field: String },
    #[error("{field} {value} out of range for pid {pid}")]
    OutOfRange {
        pid: u64,
        field: &'static str,
        value: f64,
    },
    #[error("embedding file {path}: {message}")]
    Femb { path: PathBuf, message: String },
    #[error("embedding block `{block}` has a row for pid {pid} which matches no post")]
    OrphanPid { block: String, pid: u64 },
    #[error("imputation stats have no entry for column `{0}`")]
    MissingStat(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown feature block `{0}`")]
    UnknownBlock(String),
    #[error("feature block `{0}` is enabled but its source data is absent")]
    MissingSource(String),
    #[error("labels required: {0}")]
    MissingLabel(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } | Error::Header { .. } => "parse",
            Error::DuplicatePid(_) => "duplicate-pid",
            Error::DuplicateUid(_) => "duplicate-uid",
            Error::NegativeCounter { .. } => "negative-counter",
            Error::OutOfRange { .. } => "out-of-range",
            Error::Femb { .. } => "embedding-format",
            Error::OrphanPid { .. } => "orphan-pid",
            Error::MissingStat(_) => "missing-stat",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::NotSymmetric { .. } => "not-symmetric",
            Error::InsufficientData(_) => "insufficient-data",
            Error::UnknownBlock(_) => "unknown-block",
            Error::MissingSource(_) => "missing-source",
            Error::MissingLabel(_) => "missing-label",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Fold { source, .. } => source.kind(),
            Error::Serde(_) => "serialization",
        }
    }
}
