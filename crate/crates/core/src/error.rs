use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate quaternion: norm {norm:e} is below 1e-12")]
    DegenerateQuaternion { norm: f64 },

    #[error("rotation block is not orthonormal (deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },

    #[error("{name}: expected input width {expected}, got {got}")]
    WidthMismatch {
        name: String,
        expected: usize,
        got: usize,
    },

    #[error("cannot select {requested} points out of {available}")]
    TooManyRequested { requested: usize, available: usize },

    #[error("reference point set is empty")]
    EmptyReference,

    #[error("temporal state is empty; use the cold-start path")]
    EmptyTemporalState,

    #[error("sequence needs at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },

    #[error("trajectory length mismatch: {gt} ground-truth poses vs {est} estimates")]
    LengthMismatch { gt: usize, est: usize },

    #[error("ground-truth path is {length:.3} m, shorter than the {required} m minimum segment")]
    PathTooShort { length: f64, required: f64 },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line front end: 2 for data problems,
    /// 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateQuaternion { .. } | Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
