use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("degenerate trajectory: every segment is shorter than {eps} m")]
    DegenerateTrajectory { eps: f64 },

    #[error("trajectory spans {span} s, window needs {window} s")]
    WindowMismatch { span: f64, window: f64 },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tape node {node} refers to a later node {input}")]
    GraphCycle { node: usize, input: usize },

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("candidate horizon {candidates} does not match ground-truth horizon {truth}")]
    HorizonMismatch { candidates: usize, truth: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("map has no vertices")]
    EmptyMap,

    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing upstream artifact {0}")]
    MissingUpstream(PathBuf),

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
