use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("dimension out of range: {0}")]
    DimOutOfRange(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("mask is uniform; distance to the boundary is undefined")]
    DegenerateMask,
    #[error("threshold must be non-negative, got {0}")]
    NegativeTau(f64),

    #[error("reference histogram is empty")]
    EmptyReference,
    #[error("empty input list")]
    EmptyList,
    #[error("volume has no intensity range to normalize")]
    ConstantVolume,

    #[error("rotation angle {0}° exceeds the configured bound")]
    AngleOutOfRange(f64),
    #[error("spacing {0} mm is outside the allowed range")]
    SpacingOutOfRange(f64),
    #[error("resampled size {new} is outside the allowed range around {old}")]
    SizeConstraintViolated { old: usize, new: usize },
    #[error("crop threshold {0} mm outside [0, 4]")]
    TauOutOfRange(f64),
    #[error("bad blur kernel {0}: must be odd and at least 3")]
    BadKernel(usize),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),

    #[error("ground truth mask is empty")]
    EmptyGroundTruth,
    #[error("need at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("observed values have zero variance")]
    ZeroVariance,

    #[error(transparent)]
    Tensor(#[from] mganet_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, Error>;
