//! Checkpoint directories: `manifest.json` plus a little-endian f32 blob.

use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use mganet_core::io::{atomic_write, write_json};
use mganet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::net::MgaNet;
use crate::train::StepRecord;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: usize,
    pub history: Vec<StepRecord>,
    pub params: Vec<ParamEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: MgaNet<f32>,
    pub seed: u64,
    pub step: usize,
    pub history: Vec<StepRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.to_path_buf(), source }
}

pub fn save(dir: &Path, net: &MgaNet<f32>, seed: u64, step: usize, history: &[StepRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut params = Vec::with_capacity(net.specs().len());
    let mut blob = vec![0u8; 4 * net.count_params()];
    let mut offset = 0;
    for (spec, p) in net.specs().iter().zip(net.params()) {
        LittleEndian::write_f32_into(p.data(), &mut blob[4 * offset..4 * (offset + p.len())]);
        params.push(ParamEntry { name: spec.name.clone(), shape: spec.shape.clone(), offset });
        offset += p.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: net.config().clone(),
        seed,
        step,
        history: history.to_vec(),
        params,
    };
    // blob first, so a manifest never points at a stale blob
    atomic_write(&dir.join(PARAMS), &blob)?;
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {}", m.format_version)));
    }
    let blob_path: PathBuf = dir.join(PARAMS);
    let blob = std::fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if blob.len() % 4 != 0 {
        return Err(ModelError::Checkpoint(format!("parameter blob of {} bytes", blob.len())));
    }
    let mut tensors = Vec::with_capacity(m.params.len());
    let mut expected = 0;
    for e in &m.params {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || 4 * (e.offset + n) > blob.len() {
            return Err(ModelError::Checkpoint(format!("{} lies outside the parameter blob", e.name)));
        }
        let mut data = vec![0f32; n];
        LittleEndian::read_f32_into(&blob[4 * e.offset..4 * (e.offset + n)], &mut data);
        tensors.push(Tensor::new(e.shape.clone(), data)?);
        expected += n;
    }
    if 4 * expected != blob.len() {
        return Err(ModelError::Checkpoint("parameter blob has trailing bytes".into()));
    }
    let net = MgaNet::from_params(&m.config, tensors)?;
    for (spec, e) in net.specs().iter().zip(&m.params) {
        if spec.name != e.name {
            return Err(ModelError::Checkpoint(format!("parameter {} stored as {}", spec.name, e.name)));
        }
    }
    Ok(Checkpoint { net, seed: m.seed, step: m.step, history: m.history })
}
