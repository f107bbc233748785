use crate::tensor::Shape;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("odd spatial extent: {height}x{width}")]
    OddExtent { height: usize, width: usize },

    #[error("cannot split {channels} channels into {parts} equal parts")]
    Indivisible { channels: usize, parts: usize },

    #[error("zero energy")]
    ZeroEnergy,

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
