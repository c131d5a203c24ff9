//! Error type shared by every pipeline stage.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid NIfTI file: {0}")]
    Nifti(String),

    #[error("unsupported NIfTI datatype code {0} (supported: 2 = uint8, 4 = int16, 16 = float32)")]
    UnsupportedDatatype(i16),

    #[error("expected a 3D image (dim[0] == 3), found dim[0] = {0}")]
    Dimensionality(i16),

    #[error("non-finite voxel value at linear index {index}")]
    NonFinite { index: usize },

    #[error("label volume holds non-binary value {value} at linear index {index}")]
    NonBinaryLabel { index: usize, value: f64 },

    #[error("value {value} at linear index {index} does not fit datatype {datatype}")]
    OutOfRange {
        index: usize,
        value: f64,
        datatype: &'static str,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Patch(#[from] crate::patch_plan::PatchError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("volume is (near-)constant: population std {std:e} <= 1e-8")]
    ConstantVolume { std: f64 },

    #[error("non-finite gradient in tensor '{tensor}'")]
    NonFiniteGradient { tensor: String },

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss { epoch: usize, iteration: usize },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("missing inputs: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
