use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss is not connected to any trainable parameter")]
    Detached,

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("probability {value} at ({y}, {x}) is outside [0, 1]")]
    ProbabilityOutOfRange { y: usize, x: usize, value: f64 },

    #[error("no informative candidates: every sampling weight is zero")]
    NoInformativeCandidates,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("resolution {resolution} exceeds the dense model cap of {cap}; use the analytic cost model for larger inputs")]
    ResolutionCap { resolution: usize, cap: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("bad PGM file {path}: {reason}")]
    Pgm { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("could not render a valid {class} episode in {attempts} attempts")]
    GenerationFailed { class: String, attempts: usize },

    #[error("need {needed} context episodes of class {class}, pool has {available}")]
    InsufficientContext {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
