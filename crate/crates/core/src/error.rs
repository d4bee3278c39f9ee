use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine { path: PathBuf, line: usize, reason: String },

    #[error("node id {id} out of range (graph has {num_nodes} nodes)")]
    NodeIdOutOfRange { id: usize, num_nodes: usize },

    #[error("node {node} has no feature row")]
    FeatureRowMissing { node: usize },

    #[error("feature row for node {node} has {found} values, expected {expected}")]
    InconsistentFeatureWidth { node: usize, expected: usize, found: usize },

    #[error("source and target feature widths differ ({source_width} vs {target_width})")]
    IncompatibleGraphs { source_width: usize, target_width: usize },

    #[error("every node is isolated; negative sampling distribution is empty")]
    AllNodesIsolated,

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("loss node does not belong to this tape")]
    DisconnectedLoss,

    #[error("loss node is {0:?}, expected a 1x1 scalar")]
    NonScalarLoss((usize, usize)),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        detail: String,
        last_good: Option<Box<crate::model::Checkpoint>>,
    },

    #[error("only one class present in training labels")]
    SingleClassDegenerate,

    #[error("label vocabulary mismatch: {0}")]
    LabelVocabularyMismatch(String),

    #[error("transfer protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("block {block} has no nodes (nodes_per_block must be >= 1)")]
    EmptyBlock { block: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
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

    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, lhs, rhs }
    }
}
