use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {op}: index {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("degenerate attention mask: row {row} has every key blocked")]
    DegenerateMask { row: usize },

    #[error("empty selection in {0}: weights sum to zero")]
    EmptySelection(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape, or the tape was already consumed")]
    DetachedTape,

    #[error("gradients were not reset since the previous backward pass")]
    GradientsNotReset,

    #[error("no gradients populated for any trainable parameter")]
    MissingGrads,

    #[error("unknown category {value:?} in column {column}")]
    UnknownCategory { column: String, value: String },

    #[error("degenerate column {0}: training data has zero variance or fewer than two categories")]
    DegenerateColumn(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}
