use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {malformed} of {total} rows malformed (first bad rows: {rows:?})")]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        total: usize,
        rows: Vec<usize>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid bounding box: {0}")]
    InvalidBbox(String),

    #[error("nothing to retain: every cell has zero mean activity")]
    NothingToRetain,

    #[error("no positive counts to derive a class threshold from")]
    NoPositiveCounts,

    #[error("empty sequence")]
    EmptySequence,

    #[error("need at least {needed} slots, have {available}")]
    InsufficientSlots { needed: usize, available: usize },

    #[error("split leaves the {0} side empty")]
    EmptySplit(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("leaf {0} is unbound")]
    UnboundLeaf(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("NaN gradient for parameter {0}")]
    NanGradient(String),

    #[error("window of {have} slots is shorter than the receptive field; need k >= {need}")]
    WindowTooShort { have: usize, need: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("infeasible world config: {0}")]
    Infeasible(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
