use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("input {height}x{width} is not divisible by {factor}")]
    InputSize {
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("raster {height}x{width} is smaller than the {tile}x{tile} tile")]
    RasterTooSmall {
        height: usize,
        width: usize,
        tile: usize,
    },

    #[error("mask contains value {value} which is neither 0 nor {positive}")]
    MaskValue { value: u8, positive: u8 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match the architecture: {0}")]
    Incompatible(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite value produced by node `{node}` at step {step}")]
    Diverged { node: String, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Image { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
