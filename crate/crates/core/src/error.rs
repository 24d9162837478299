use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NotFinite { op: &'static str },
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("input size {size} is not divisible by the encoder scale {scale}")]
    SizeNotDivisible { size: usize, scale: usize },
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("proposal patch must be {expected}x{expected}, got {got:?}")]
    WrongPatchSize { expected: usize, got: Vec<usize> },
    #[error("requested {requested} superpixels for an image of {pixels} pixels")]
    MTooLarge { requested: usize, pixels: usize },
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("class {0} has no training samples")]
    MissingClass(usize),
    #[error("non-finite loss in stage {stage}, epoch {epoch}: {detail}")]
    NonFiniteLoss {
        stage: u8,
        epoch: usize,
        detail: String,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
