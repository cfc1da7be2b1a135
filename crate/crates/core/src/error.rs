use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("mesh has no per-vertex UV coordinates")]
    MissingUv,

    #[error("reference triangle {0} is degenerate")]
    DegenerateTriangle(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("normal is not unit length (norm = {0})")]
    NonUnitNormal(f64),

    #[error("points at or before the near plane: {0:?}")]
    BehindNearPlane(Vec<usize>),

    #[error("frame {0} has an empty photometric mask")]
    EmptyMask(usize),

    #[error("no valid landmarks")]
    NoValidLandmarks,

    #[error("non-finite value in loss term `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),

    #[error("template has no UV parsing map")]
    MissingParseMap,

    #[error("fit stalled: {0}")]
    MaskStarvation(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
