use thiserror::Error;

/// Errors produced by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("spatial extent {extent} is not divisible by {divisor}")]
    NotDivisible { extent: usize, divisor: usize },

    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("backward called without a cached forward pass")]
    NoCachedForward,

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("requested {folds} folds for a dataset of {size} volumes")]
    TooManyFolds { folds: usize, size: usize },

    #[error("window {offsets:?}+{extents:?} exceeds volume {dims:?}")]
    WindowOutOfBounds {
        offsets: [usize; 3],
        extents: [usize; 3],
        dims: [usize; 3],
    },

    #[error("source half contains {0} foreground voxels")]
    ForegroundInSourceHalf(usize),

    #[error("heterogeneous ensemble: {0}")]
    HeterogeneousEnsemble(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
