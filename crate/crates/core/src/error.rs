use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter set '{0}' is frozen and cannot be updated")]
    Frozen(String),

    #[error("labels of the {0} dataset are hidden")]
    LabelsHidden(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed network spec: {0}")]
    MalformedSpec(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint spec hash {found} does not match expected {expected}")]
    SpecMismatch { expected: String, found: String },

    #[error("file format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
