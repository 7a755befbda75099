use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("invalid model spec at layer `{layer}`: {reason}")]
    Spec { layer: String, reason: String },

    #[error("invalid prune mask: {0}")]
    Mask(String),

    #[error("target of {target} MACs is unreachable (floor {floor} MACs with min_keep); binding layers: {layers}")]
    UnreachableTarget {
        target: u64,
        floor: u64,
        layers: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("undefined AUC: {0}")]
    UndefinedAuc(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
