use thiserror::Error;

use crate::trainer::MetricsRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid geometry: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular system: pivot {pivot:e} at column {column} is below tolerance")]
    Singular { pivot: f64, column: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("batch norm needs at least 2 samples in training mode, got {0}")]
    DegenerateBatch(usize),

    #[error("backward called on {0} before a training-mode forward pass")]
    MissingCache(&'static str),

    #[error("zero interaction vector for input neuron {neuron}; back-matching ratio is undefined")]
    ZeroInteraction { neuron: usize },

    #[error("least-squares oracle has {unknowns} unknowns per row, limit is {limit}")]
    TooLarge { unknowns: usize, limit: usize },

    #[error("layer {layer} has an all-zero weight norm")]
    DegenerateWeight { layer: usize },

    #[error("backward factor walk reached a nonpositive value {value} at layer {layer}")]
    CorruptedFactor { layer: usize, value: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("network construction failed at {junction}: {detail}")]
    Construction { junction: String, detail: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        recent: Vec<MetricsRow>,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
