use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("degenerate batch in {op}: {detail}")]
    DegenerateBatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("unknown architecture '{0}' (expected resnet18_3d, resnet18_3d_tab or resnet34_3d_tab)")]
    UnknownArch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },

    #[error("{dir}: found {found} frames, need {needed}")]
    InsufficientFrames {
        dir: PathBuf,
        found: usize,
        needed: usize,
    },

    #[error("{dir}: {detail}")]
    InconsistentFrames { dir: PathBuf, detail: String },

    #[error("schema error in {path}: {detail}")]
    Schema { path: PathBuf, detail: String },

    #[error("{path}: row {row}, column '{column}': cannot parse '{value}' as a number")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("feature '{0}' has no observed values in the training split")]
    DegenerateFeature(String),

    #[error("class {0} has no samples; class weights are undefined")]
    DegenerateClass(usize),

    #[error("split needs {needed} ids, only {available} available")]
    TooFewIds { needed: usize, available: usize },

    #[error("the {0} split is empty")]
    EmptySplit(&'static str),

    #[error("sample '{id}': {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint integrity error: {0}")]
    CheckpointIntegrity(String),

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    CheckpointVersion { found: u16, supported: u16 },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } => ErrorKind::Numeric,
            Error::Config(_) | Error::UnknownArch(_) | Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::Sample { source, .. } => source.kind(),
            Error::InvalidGeometry(_)
            | Error::ShapeMismatch { .. }
            | Error::DegenerateBatch { .. }
            | Error::NonScalarLoss(_)
            | Error::GraphConsumed => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_sample(self, id: &str) -> Self {
        Error::Sample {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}
