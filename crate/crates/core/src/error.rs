use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: expected {expected:?}, got {actual:?}")]
    Shape {
        node: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("backward requires a scalar loss, node {node} has shape {shape:?}")]
    NotScalar { node: usize, shape: Vec<usize> },

    #[error("node {node} has not been evaluated; run a forward pass first")]
    NotEvaluated { node: usize },

    #[error("non-finite value {value} at coordinate {coordinate}")]
    NonFinite { coordinate: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class {class} has {available} samples, episode needs {needed} (short by {})", needed - available)]
    InsufficientClass {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("class {0} has no support embeddings")]
    EmptyClass(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("sample {0} has no expert mask")]
    MissingMask(String),

    #[error("lambda {0} outside [0, 1]")]
    InvalidLambda(f64),

    #[error("pool of {available} samples cannot supply {needed}")]
    PoolExhausted { needed: usize, available: usize },

    #[error("non-finite loss in episode with seed {episode_seed} (epoch {epoch}, episode {episode})")]
    NonFiniteLoss {
        episode_seed: u64,
        epoch: usize,
        episode: usize,
    },

    #[error("class {0} is absent from the evaluation set; its AUC is undefined")]
    AbsentClass(usize),

    #[error("pgm parse error at byte {offset}: {message}")]
    Pgm { offset: usize, message: String },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

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

    pub(crate) fn shape(node: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            node: node.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteLoss { .. })
    }
}
