//! Volumes with physical geometry.
//!
//! Voxel `(x, y, z)` lives at linear index `x + nx·(y + ny·z)`: x varies
//! fastest, z slowest. Every module uses this single layout.

use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};

/// Grid size, voxel spacing (mm) and the index→world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
}

impl Geometry {
    /// Axis-aligned grid with its first voxel at the world origin.
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let affine = Matrix4::new_nonuniform_scaling(&nalgebra::Vector3::from(spacing));
        Self::with_affine(dims, spacing, affine)
    }

    pub fn with_affine(dims: [usize; 3], spacing: [f64; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::DimOutOfRange(format!("dims {dims:?} must all be at least 1")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!("spacing {spacing:?} must be positive")));
        }
        let linear = affine.fixed_view::<3, 3>(0, 0);
        if !linear.determinant().is_normal() {
            return Err(Error::InvalidVolume("affine is singular".into()));
        }
        Ok(Self { dims, spacing, affine })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical volume of one voxel, mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn index_to_world(&self, ijk: [f64; 3]) -> [f64; 3] {
        let w = self.affine * Vector4::new(ijk[0], ijk[1], ijk[2], 1.0);
        [w[0], w[1], w[2]]
    }

    pub fn world_to_index(&self, xyz: [f64; 3]) -> [f64; 3] {
        let inv = self.affine.try_inverse().expect("affine checked invertible at construction");
        let v = inv * Vector4::new(xyz[0], xyz[1], xyz[2], 1.0);
        [v[0], v[1], v[2]]
    }

    /// Same grid size and spacing (within 1e-6 mm).
    pub fn ensure_same_grid(&self, other: &Geometry) -> Result<()> {
        let spacing_ok = self.spacing.iter().zip(other.spacing).all(|(a, b)| (a - b).abs() <= 1e-6);
        if self.dims != other.dims || !spacing_ok {
            return Err(Error::GeometryMismatch(format!(
                "{:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )));
        }
        Ok(())
    }

    /// Same grid with a different spacing; the affine's axes are rescaled to match.
    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Geometry> {
        let mut affine = self.affine;
        for (axis, (&new, &old)) in spacing.iter().zip(&self.spacing).enumerate() {
            for row in 0..3 {
                affine[(row, axis)] *= new / old;
            }
        }
        Geometry::with_affine(self.dims, spacing, affine)
    }
}

/// A scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidVolume(format!("{} values for a {:?} grid", data.len(), geom.dims)));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Self {
        let n = geom.len();
        Self { geom, data: vec![value; n] }
    }

    pub fn from_fn(geom: Geometry, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let data = (0..geom.len())
            .map(|i| {
                let [x, y, z] = geom.coords(i);
                f(x, y, z)
            })
            .collect();
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Volume> {
        Volume::new(self.geom.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume { geom: self.geom.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `(min, max)` over all voxels.
    pub fn intensity_range(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Zero every voxel outside `mask`.
    pub fn masked(&self, mask: &BinaryMask) -> Result<Volume> {
        self.geom.ensure_same_grid(mask.geometry())?;
        let data = self.data.iter().zip(mask.data()).map(|(&v, &m)| if m == 1 { v } else { 0.0 }).collect();
        self.with_data(data)
    }
}

/// Product of the spacing components, in mm³.
pub fn voxel_volume(v: &Volume) -> f64 {
    v.geometry().voxel_volume()
}

/// Number of voxels set in `m`.
pub fn mask_count(m: &BinaryMask) -> usize {
    m.count()
}

/// A binary image; every voxel is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    geom: Geometry,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidVolume(format!("{} mask values for a {:?} grid", data.len(), geom.dims)));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidVolume("mask values must be 0 or 1".into()));
        }
        Ok(Self { geom, data })
    }

    pub fn from_fn(geom: Geometry, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let data = (0..geom.len())
            .map(|i| {
                let [x, y, z] = geom.coords(i);
                u8::from(f(x, y, z))
            })
            .collect();
        Self { geom, data }
    }

    /// Voxels where `v` is strictly positive.
    pub fn from_positive(v: &Volume) -> Self {
        Self { geom: v.geom.clone(), data: v.data.iter().map(|&x| u8::from(x > 0.0)).collect() }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geom.index(x, y, z)] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask { geom: self.geom.clone(), data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    /// Is every set voxel of `self` also set in `other`?
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn to_volume(&self) -> Volume {
        Volume { geom: self.geom.clone(), data: self.data.iter().map(|&v| v as f32).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn voxel_volume_examples() {
        let v = |s| Volume::filled(Geometry::new([2, 2, 2], s).unwrap(), 0.0);
        assert_eq!(voxel_volume(&v([1.0, 1.0, 1.0])), 1.0);
        assert!((voxel_volume(&v([0.7, 0.7, 0.7])) - 0.343).abs() < 1e-12);
        assert!((voxel_volume(&v([0.9, 0.9, 1.2])) - 0.972).abs() < 1e-12);
    }

    #[test]
    fn mask_count_examples() {
        let g = Geometry::new([4, 4, 4], [1.0; 3]).unwrap();
        assert_eq!(mask_count(&BinaryMask::from_fn(g.clone(), |_, _, _| false)), 0);
        assert_eq!(mask_count(&BinaryMask::from_fn(g, |_, _, _| true)), 64);
    }

    #[test]
    fn seeded_mask_count_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = Geometry::new([8, 8, 8], [1.0; 3]).unwrap();
        let data: Vec<u8> = (0..512).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let mut brute = 0;
        for &v in &data {
            if v == 1 {
                brute += 1;
            }
        }
        assert_eq!(mask_count(&BinaryMask::new(g, data).unwrap()), brute);
    }

    #[test]
    fn rejects_invalid_geometry() {
        assert!(matches!(Geometry::new([0, 4, 4], [1.0; 3]), Err(Error::DimOutOfRange(_))));
        assert!(Geometry::new([4, 4, 4], [1.0, 0.0, 1.0]).is_err());
        let g = Geometry::new([2, 2, 2], [1.0; 3]).unwrap();
        assert!(Volume::new(g.clone(), vec![0.0; 7]).is_err());
        assert!(BinaryMask::new(g, vec![2; 8]).is_err());
    }

    #[test]
    fn layout_is_x_fastest() {
        let g = Geometry::new([3, 4, 5], [1.0; 3]).unwrap();
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
        assert_eq!(g.coords(g.index(2, 3, 4)), [2, 3, 4]);
    }

    proptest! {
        #[test]
        fn world_round_trip(
            ijk in prop::array::uniform3(-50.0f64..50.0),
            rot in -3.0f64..3.0,
            shift in prop::array::uniform3(-100.0f64..100.0),
            spacing in prop::array::uniform3(0.3f64..4.0),
        ) {
            let (s, c) = rot.sin_cos();
            let mut a = Matrix4::identity();
            a[(0, 0)] = c * spacing[0];
            a[(0, 1)] = -s * spacing[1];
            a[(1, 0)] = s * spacing[0];
            a[(1, 1)] = c * spacing[1];
            a[(2, 2)] = spacing[2];
            a[(0, 3)] = shift[0];
            a[(1, 3)] = shift[1];
            a[(2, 3)] = shift[2];
            let g = Geometry::with_affine([4, 4, 4], spacing, a).unwrap();
            let back = g.world_to_index(g.index_to_world(ijk));
            for k in 0..3 {
                prop_assert!((back[k] - ijk[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn complement_counts_partition(bits in prop::collection::vec(0u8..2, 60)) {
            let m = BinaryMask::new(Geometry::new([3, 4, 5], [1.0; 3]).unwrap(), bits).unwrap();
            prop_assert_eq!(m.count() + m.complement().count(), 60);
        }
    }
}
