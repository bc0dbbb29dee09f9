//! Exact Euclidean signed distance transforms and threshold-derived masks.
//!
//! Distances are measured in mm between voxel centres. A voxel inside the
//! mask gets `+d` (distance to the nearest outside voxel), a voxel outside
//! gets `-d` (distance to the nearest inside voxel); there is no half-voxel
//! offset, so the zero level set falls between the two classes and
//! `threshold_mask(sdt, 0)` reproduces the mask exactly.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry, Volume};

/// Default saturation of training targets, mm.
pub const DEFAULT_D_MAX: f64 = 5.0;
/// Outward margin of the reference brain mask, mm.
pub const REFERENCE_MARGIN_MM: f64 = 4.0;

/// Signed distance to a mask boundary, positive inside, saturated at `±d_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdtMap {
    geom: Geometry,
    data: Vec<f32>,
    d_max: f32,
}

impl SdtMap {
    /// Wrap arbitrary signed distances (e.g. network output), clamping to `±d_max`.
    pub fn from_values(geom: Geometry, data: Vec<f32>, d_max: f64) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidVolume(format!("{} values for a {:?} grid", data.len(), geom.dims())));
        }
        let cap = d_max as f32;
        let data = data.into_iter().map(|v| v.clamp(-cap, cap)).collect();
        Ok(Self { geom, data, d_max: cap })
    }

    pub fn from_volume(v: &Volume, d_max: f64) -> Result<Self> {
        Self::from_values(v.geometry().clone(), v.data().to_vec(), d_max)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn d_max(&self) -> f64 {
        self.d_max as f64
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.geom.clone(), self.data.clone()).expect("same geometry")
    }
}

/// One-dimensional squared distance transform of sampled function `f` on a
/// grid with spacing `w` (lower envelope of parabolas). `f` holds squared
/// distances, `f64::INFINITY` where there is no site.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * w;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&top) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[top] + pos(top) * pos(top))) / (2.0 * (pos(q) - pos(top)));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel centre to the nearest
/// voxel where `site` is true; infinite when there are no sites.
pub fn squared_distance_to(geom: &Geometry, site: impl Fn(usize) -> bool) -> Vec<f64> {
    let dims = geom.dims();
    let spacing = geom.spacing();
    let mut d: Vec<f64> = (0..geom.len()).map(|i| if site(i) { 0.0 } else { f64::INFINITY }).collect();
    let longest = dims.iter().copied().max().unwrap_or(1);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (Vec::with_capacity(longest), Vec::with_capacity(longest));
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        for start in 0..geom.len() {
            // visit each line once, from the voxel whose coordinate on `axis` is 0
            if geom.coords(start)[axis] != 0 {
                continue;
            }
            for q in 0..n {
                line[q] = d[start + q * stride];
            }
            edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut z);
            for q in 0..n {
                d[start + q * stride] = out[q];
            }
        }
    }
    d
}

/// Signed Euclidean distance to the mask boundary, positive inside, clamped to `±d_max`.
pub fn signed_distance(m: &BinaryMask, d_max: f64) -> Result<SdtMap> {
    let count = m.count();
    if count == 0 || count == m.data().len() {
        return Err(Error::DegenerateMask);
    }
    let mask = m.data();
    let to_inside = squared_distance_to(m.geometry(), |i| mask[i] == 1);
    let to_outside = squared_distance_to(m.geometry(), |i| mask[i] == 0);
    let data = mask
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = if v == 1 { to_outside[i].sqrt() } else { -to_inside[i].sqrt() };
            d.clamp(-d_max, d_max) as f32
        })
        .collect();
    Ok(SdtMap { geom: m.geometry().clone(), data, d_max: d_max as f32 })
}

/// Voxels with `sdt ≥ -tau`: the interior grown outward by `tau` mm.
pub fn threshold_mask(s: &SdtMap, tau: f64) -> Result<BinaryMask> {
    if tau < 0.0 || tau.is_nan() {
        return Err(Error::NegativeTau(tau));
    }
    let cut = -(tau as f32);
    BinaryMask::new(s.geom.clone(), s.data.iter().map(|&v| u8::from(v >= cut)).collect())
}

/// The mask grown by the 4 mm reference margin.
pub fn reference_mask(m: &BinaryMask) -> Result<BinaryMask> {
    // The cap must exceed the margin, or saturated far-outside voxels would pass.
    let cap = REFERENCE_MARGIN_MM + 2.0 * m.geometry().spacing().iter().copied().fold(0.0, f64::max);
    threshold_mask(&signed_distance(m, cap)?, REFERENCE_MARGIN_MM)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> Geometry {
        Geometry::new([n, n, n], [1.0; 3]).unwrap()
    }

    /// Nearest opposite-class voxel by exhaustive search.
    fn brute(m: &BinaryMask) -> Vec<f64> {
        let g = m.geometry();
        let sp = g.spacing();
        (0..g.len())
            .map(|i| {
                let a = g.coords(i);
                let inside = m.data()[i] == 1;
                let best = (0..g.len())
                    .filter(|&j| (m.data()[j] == 1) != inside)
                    .map(|j| {
                        let b = g.coords(j);
                        (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * sp[k]).powi(2)).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt();
                if inside {
                    best
                } else {
                    -best
                }
            })
            .collect()
    }

    #[test]
    fn single_voxel_matches_brute_force() {
        let m = BinaryMask::from_fn(unit(5), |x, y, z| (x, y, z) == (2, 2, 2));
        let s = signed_distance(&m, 100.0).unwrap();
        assert_eq!(s.data()[unit(5).index(2, 2, 2)], 1.0);
        for (a, b) in s.data().iter().zip(brute(&m)) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        assert!((s.data()[0] as f64 + 12f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn anisotropic_half_space_steps_along_z() {
        let g = Geometry::new([8, 8, 8], [1.0, 1.0, 2.0]).unwrap();
        let m = BinaryMask::from_fn(g.clone(), |_, _, z| z < 4);
        let s = signed_distance(&m, 100.0).unwrap();
        for z in 0..8 {
            let want = if z < 4 { (4 - z) as f32 * 2.0 } else { -((z - 3) as f32) * 2.0 };
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(s.data()[g.index(x, y, z)], want);
                }
            }
        }
    }

    #[test]
    fn uniform_masks_are_degenerate() {
        let g = unit(3);
        assert!(matches!(signed_distance(&BinaryMask::from_fn(g.clone(), |_, _, _| true), 5.0), Err(Error::DegenerateMask)));
        assert!(matches!(signed_distance(&BinaryMask::from_fn(g, |_, _, _| false), 5.0), Err(Error::DegenerateMask)));
    }

    #[test]
    fn values_saturate_at_cap() {
        let m = BinaryMask::from_fn(unit(12), |x, _, _| x < 6);
        let s = signed_distance(&m, 2.5).unwrap();
        assert!(s.data().iter().all(|v| v.abs() <= 2.5));
        assert_eq!(s.data()[unit(12).index(0, 0, 0)], 2.5);
        assert_eq!(s.data()[unit(12).index(11, 0, 0)], -2.5);
    }

    #[test]
    fn threshold_examples() {
        let m = BinaryMask::from_fn(unit(10), |x, y, z| x.abs_diff(5) + y.abs_diff(5) + z.abs_diff(4) <= 3);
        let s = signed_distance(&m, DEFAULT_D_MAX).unwrap();
        assert_eq!(threshold_mask(&s, 0.0).unwrap(), m);
        let grown = threshold_mask(&s, DEFAULT_D_MAX).unwrap();
        assert!(m.is_subset_of(&grown));
        assert!(matches!(threshold_mask(&s, -1.0), Err(Error::NegativeTau(_))));
    }

    fn sphere(n: usize, c: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(unit(n), |x, y, z| {
            (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2) <= r * r
        })
    }

    /// Voxels within `r` mm of some mask voxel.
    fn dilate(m: &BinaryMask, r: f64) -> BinaryMask {
        let g = m.geometry().clone();
        let inside: Vec<[usize; 3]> = (0..g.len()).filter(|&i| m.data()[i] == 1).map(|i| g.coords(i)).collect();
        BinaryMask::from_fn(g, |x, y, z| {
            inside.iter().any(|p| {
                let d2 = (p[0] as f64 - x as f64).powi(2) + (p[1] as f64 - y as f64).powi(2) + (p[2] as f64 - z as f64).powi(2);
                d2 <= r * r
            })
        })
    }

    #[test]
    fn tau_two_equals_brute_force_dilation() {
        let m = sphere(16, 7.5, 4.0);
        let s = signed_distance(&m, DEFAULT_D_MAX).unwrap();
        assert_eq!(threshold_mask(&s, 2.0).unwrap(), dilate(&m, 2.0));
    }

    #[test]
    fn reference_mask_is_four_mm_dilation() {
        let m = sphere(24, 11.5, 5.0);
        let r = reference_mask(&m).unwrap();
        assert!(m.is_subset_of(&r));
        assert_eq!(r, dilate(&m, 4.0));
    }

    #[test]
    fn reference_mask_clips_at_border() {
        let m = BinaryMask::from_fn(unit(8), |x, y, _| x < 2 && y < 3);
        let r = reference_mask(&m).unwrap();
        assert_eq!(r.data().len(), 512);
        assert_eq!(r, dilate(&m, 4.0));
    }
}
