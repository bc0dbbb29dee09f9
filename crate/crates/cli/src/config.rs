use std::path::{Path, PathBuf};

use mganet_core::preprocess::PreprocessConfig;
use mganet_model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModalityArg {
    #[default]
    Mri,
    Ultrasound,
}

impl From<ModalityArg> for mganet_tensor::Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Mri => mganet_tensor::Modality::Mri,
            ModalityArg::Ultrasound => mganet_tensor::Modality::Ultrasound,
        }
    }
}

/// One training case on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub modality: ModalityArg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// SDT threshold of the final mask, mm.
    pub tau: f64,
    /// Threshold grid of the sensitivity sweep, mm.
    pub sweep_taus: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { tau: mganet_model::infer::DEFAULT_TAU, sweep_taus: vec![0.0, 1.0, 2.0, 3.0, 4.0] }
    }
}

/// Every setting of a run in one document; command-line flags override it.
/// Augmentation settings live under `train.augment`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    /// Training cases, used when none are given on the command line.
    pub data: Vec<DataEntry>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: String| CliError::ConfigInvalid(e);
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        if self.preprocess.target_size < 8 {
            return Err(invalid(format!("preprocess target size {} below 8", self.preprocess.target_size)));
        }
        if self.metrics.tau < 0.0 || self.metrics.sweep_taus.iter().any(|t| !(*t >= 0.0)) {
            return Err(invalid("thresholds must be non-negative".into()));
        }
        Ok(())
    }
}
