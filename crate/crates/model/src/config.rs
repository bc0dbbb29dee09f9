use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the cubic input; three stride-2 stages need a multiple of 8.
    pub input_side: usize,
    /// Multiplier on the 16/32/64 base channel ladder.
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Saturation of the SDT targets, mm.
    pub d_max: f64,
    pub use_mga: bool,
    pub use_spe: bool,
    pub use_da: bool,
    /// Average-pool factor applied before mask-guided attention (1 = full resolution).
    pub mga_pool: usize,
    /// Negative slope of the leaky ReLU activations.
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_side: 128,
            width: 1,
            heads: 4,
            head_dim: 16,
            d_max: mganet_core::sdt::DEFAULT_D_MAX,
            use_mga: true,
            use_spe: true,
            use_da: true,
            mga_pool: 1,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for CPU-scale experiments.
    pub fn desk() -> Self {
        Self { input_side: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.input_side < 8 || self.input_side % 8 != 0 {
            return fail(format!("input side {} is not a positive multiple of 8", self.input_side));
        }
        if self.width == 0 || self.heads == 0 || self.head_dim == 0 {
            return fail("width, heads and head_dim must be positive".into());
        }
        let mga_side = self.input_side / 4;
        if self.mga_pool == 0 || mga_side % self.mga_pool != 0 {
            return fail(format!("mga_pool {} does not divide the {mga_side}³ attention grid", self.mga_pool));
        }
        if !(self.d_max > 0.0) {
            return fail(format!("d_max {} must be positive", self.d_max));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return fail(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    pub(crate) fn channels(&self, base: usize) -> usize {
        base * self.width
    }

    pub(crate) fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn side_must_divide_by_eight() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { input_side: 12, ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));
        let pool = ModelConfig { input_side: 32, mga_pool: 3, ..ModelConfig::default() };
        assert!(pool.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"input_side": 32, "depth": 3}"#).is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"input_side": 32}"#).unwrap();
        assert_eq!(c, ModelConfig::desk());
    }
}
