use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{0}: backward called without a cached forward pass")]
    MissingCache(&'static str),

    #[error("batch normalization in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("normalization cache was recorded in {cached} mode but backward was called in {requested} mode")]
    ModeMismatch {
        cached: &'static str,
        requested: &'static str,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("model topologies differ: {0}")]
    TopologyMismatch(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
