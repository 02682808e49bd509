use std::path::PathBuf;

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

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("CRF refinement produced a non-finite value at iteration {iteration}")]
    NonFiniteIteration { iteration: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: loss is not connected to any tensor that requires a gradient")]
    Detached,

    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),

    #[error("tensor `{name}`: expected shape {expected:?}, checkpoint has {found:?}")]
    CheckpointMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    CheckpointMissing(String),

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("sample `{id}`: {msg}")]
    Sample { id: String, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("training diverged (non-finite loss) in {phase} epoch {epoch}")]
    Diverged { phase: String, epoch: usize },

    #[error("threshold alternation diverged at round {round}")]
    AlternationDiverged { round: usize },

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

    /// True for errors caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteIteration { .. }
                | Error::Diverged { .. }
                | Error::AlternationDiverged { .. }
        )
    }

    /// True for errors caused by configuration or input validation.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::CheckpointMismatch { .. } | Error::CheckpointMissing(_))
    }
}
