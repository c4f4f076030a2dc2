use std::path::PathBuf;

/// Errors produced by the refinement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown label id {label} (prior has {n_labels} labels)")]
    UnknownLabel { label: usize, n_labels: usize },

    #[error("timestep {t} outside allowed range [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing view {0}")]
    MissingView(usize),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("corrupt checkpoint {path:?}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint {path:?} has format version {found}, expected {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error("remote enhancer failed after {attempts} attempts: {detail}")]
    Remote { attempts: usize, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("image codec error: {0}")]
    Image(String),

    #[error("i/o error at {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
