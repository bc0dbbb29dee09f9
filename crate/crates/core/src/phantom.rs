//! Synthetic head phantoms with a known brain mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::{BinaryMask, Geometry, Volume};

/// Concentric spherical head: textured brain, dark CSF rim, bright skull, scalp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPhantom {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub brain_radius_mm: f64,
    pub skull_inner_mm: f64,
    pub skull_outer_mm: f64,
    pub scalp_outer_mm: f64,
    pub seed: u64,
}

impl Default for HeadPhantom {
    fn default() -> Self {
        Self {
            dims: [48; 3],
            spacing: [1.0; 3],
            brain_radius_mm: 20.0,
            skull_inner_mm: 21.0,
            skull_outer_mm: 22.5,
            scalp_outer_mm: 23.5,
            seed: 7,
        }
    }
}

impl HeadPhantom {
    fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing)
    }

    /// Distance in mm from the grid centre.
    fn radius(&self, x: usize, y: usize, z: usize) -> f64 {
        let p = [x, y, z];
        (0..3)
            .map(|a| ((p[a] as f64 - (self.dims[a] - 1) as f64 / 2.0) * self.spacing[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn mask(&self) -> Result<BinaryMask> {
        Ok(BinaryMask::from_fn(self.geometry()?, |x, y, z| self.radius(x, y, z) <= self.brain_radius_mm))
    }

    pub fn image(&self) -> Result<Volume> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // a few low-frequency waves give the brain some internal structure
        let waves: Vec<([f64; 3], f64)> = (0..4)
            .map(|_| (std::array::from_fn(|_| rng.random_range(-0.35..0.35)), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let sp = self.spacing;
        Ok(Volume::from_fn(self.geometry()?, |x, y, z| {
            let r = self.radius(x, y, z);
            if r <= self.brain_radius_mm {
                let p = [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];
                let tex: f64 = waves.iter().map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum::<f64>() / 4.0;
                (0.55 + 0.15 * tex) as f32
            } else if r <= self.skull_inner_mm {
                0.1
            } else if r <= self.skull_outer_mm {
                0.95
            } else if r <= self.scalp_outer_mm {
                0.4
            } else {
                0.0
            }
        }))
    }

    /// Exact volume of the brain sphere in mL.
    pub fn brain_volume_ml(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.brain_radius_mm.powi(3) / 1000.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tbv_ml;

    #[test]
    fn voxelized_brain_matches_sphere_volume() {
        let p = HeadPhantom::default();
        let m = p.mask().unwrap();
        assert!((tbv_ml(&m) / p.brain_volume_ml() - 1.0).abs() < 0.01);
        assert!((p.brain_volume_ml() - 33.51).abs() < 0.01);
    }

    #[test]
    fn image_layers_and_determinism() {
        let p = HeadPhantom::default();
        let v = p.image().unwrap();
        assert_eq!(v, p.image().unwrap());
        assert_eq!(v.get(0, 0, 0), 0.0);
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let m = p.mask().unwrap();
        assert!(m.data().iter().zip(v.data()).all(|(m, x)| *m == 0 || (0.3..=0.8).contains(x)));
    }
}
