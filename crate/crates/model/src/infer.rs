//! Inference: forward pass, threshold, and mapping back to the source grid.

use mganet_core::preprocess::{preprocess_image, unpad, PadRecord, PreprocessConfig};
use mganet_core::sdt::{threshold_mask, SdtMap};
use mganet_core::metrics::tbv_ml;
use mganet_core::{BinaryMask, Error as CoreError, Volume};
use mganet_tensor::Modality;

use crate::error::Result;
use crate::net::MgaNet;
use crate::train::volume_tensor;

/// Default SDT threshold for the final mask, mm.
pub const DEFAULT_TAU: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct Inference {
    /// Predicted SDT on the original grid, clamped to `±d_max`.
    pub sdt: SdtMap,
    pub mask: BinaryMask,
    /// Reconstruction restricted to the mask, clamped to `[0, 1]`.
    pub recon: Volume,
    pub tbv_ml: f64,
}

/// Run the network on a preprocessed `N³` cube and map the outputs back through `record`.
pub fn infer_prepared(net: &MgaNet<f32>, image: &Volume, record: &PadRecord, modality: Modality, tau: f64) -> Result<Inference> {
    let n = net.config().input_side;
    if image.dims() != [n; 3] {
        return Err(CoreError::GeometryMismatch(format!("network expects {n}³ input, got {:?}", image.dims())).into());
    }
    if record.target != n {
        return Err(CoreError::GeometryMismatch(format!("pad record targets {}³, network is {n}³", record.target)).into());
    }
    let (sdt, recon) = net.predict(&volume_tensor(image)?, modality)?;
    let cube = image.geometry().clone();
    let sdt = unpad(&Volume::new(cube.clone(), sdt.into_data())?, record)?;
    let sdt = SdtMap::from_volume(&sdt, net.config().d_max)?;
    let mask = threshold_mask(&sdt, tau)?;
    let recon = unpad(&Volume::new(cube, recon.into_data())?, record)?.masked(&mask)?.map(|x| x.clamp(0.0, 1.0));
    let tbv_ml = tbv_ml(&mask);
    Ok(Inference { sdt, mask, recon, tbv_ml })
}

/// Preprocess a raw volume, then [`infer_prepared`].
pub fn infer(net: &MgaNet<f32>, raw: &Volume, pre: &PreprocessConfig, modality: Modality, tau: f64) -> Result<Inference> {
    let pre = PreprocessConfig { target_size: net.config().input_side, ..pre.clone() };
    let (image, record) = preprocess_image(raw, &pre)?;
    infer_prepared(net, &image, &record, modality, tau)
}
