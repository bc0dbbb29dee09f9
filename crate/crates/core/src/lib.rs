//! Volumes, NIfTI-1 I/O, signed distance transforms, preprocessing,
//! augmentation and evaluation metrics for brain extraction.

pub mod augment;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod preprocess;
pub mod resample;
pub mod sdt;
pub mod volume;

pub use error::{Error, Result};
pub use sdt::{reference_mask, signed_distance, threshold_mask, SdtMap};
pub use volume::{mask_count, voxel_volume, BinaryMask, Geometry, Volume};
