use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar output, got shape {shape}")]
    NotAScalar { shape: String },

    #[error("backward on a detached graph: no gradient-requiring tensor is reachable")]
    DetachedGraph,

    #[error("image too small: {height}x{width}, minimum {min}x{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("out of bounds: {detail}")]
    OutOfBounds { detail: String },

    #[error("weight container: {detail}")]
    Format { detail: String },

    #[error("empty dataset under {root}")]
    EmptyDataset { root: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged at epoch {epoch}: epoch loss {current:.6} > {factor}x initial {initial:.6}")]
    Diverged {
        epoch: usize,
        initial: f64,
        current: f64,
        factor: f64,
    },

    #[error("metric failed: {detail}")]
    Metric { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(detail: impl Into<String>) -> Self {
        Error::Format {
            detail: detail.into(),
        }
    }
}
