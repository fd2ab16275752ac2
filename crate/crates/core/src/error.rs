use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate graph: need at least 2 instances, got {0}")]
    DegenerateGraph(usize),

    #[error("empty graph: total edge mass is zero")]
    EmptyGraph,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite {term} loss ({value}) at epoch {epoch}, sample {sample}")]
    NonFiniteLoss {
        term: &'static str,
        value: f64,
        epoch: usize,
        sample: String,
    },

    #[error("{path}: bad magic {found:?}, expected \"UMFB\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: truncated feature file, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: dimensions {rows}x{cols} overflow addressable size")]
    DimensionOverflow { path: PathBuf, rows: u32, cols: u32 },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
