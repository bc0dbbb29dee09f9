//! Seeded training-time transforms of image/SDT pairs.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{histogram_match, Histogram};
use crate::resample::{trilinear, Boundary};
use crate::sdt::{threshold_mask, SdtMap};
use crate::volume::{Geometry, Volume};

/// Largest SDT crop margin, mm.
pub const MAX_CROP_TAU: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_deg: [f64; 2],
    pub zoom_spacing: [f64; 2],
    /// Allowed relative change of the resampled size: the ratio old/new spacing
    /// must lie in `[1 − limit, 1 / (1 − limit)]`.
    pub zoom_size_limit: f64,
    pub sdt_crop_tau: [f64; 2],
    pub blur_kernels: Vec<usize>,
    pub noise_sigma: [f64; 2],
    pub p_histogram_match: f64,
    pub p_rotate: f64,
    pub p_zoom: f64,
    pub p_sdt_crop: f64,
    pub p_motion_blur: f64,
    pub p_noise: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: [-10.0, 10.0],
            zoom_spacing: [0.5, 4.0],
            zoom_size_limit: 0.5,
            sdt_crop_tau: [0.0, MAX_CROP_TAU],
            blur_kernels: vec![5, 11],
            noise_sigma: [0.0, 0.05],
            p_histogram_match: 0.5,
            p_rotate: 0.5,
            p_zoom: 0.3,
            p_sdt_crop: 0.5,
            p_motion_blur: 0.2,
            p_noise: 0.3,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        Self {
            p_histogram_match: 0.0,
            p_rotate: 0.0,
            p_zoom: 0.0,
            p_sdt_crop: 0.0,
            p_motion_blur: 0.0,
            p_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        for (name, r) in [
            ("rotation_deg", self.rotation_deg),
            ("zoom_spacing", self.zoom_spacing),
            ("sdt_crop_tau", self.sdt_crop_tau),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(&format!("{name} range {r:?} is not ordered"));
            }
        }
        if self.zoom_spacing[0] <= 0.0 || self.noise_sigma[0] < 0.0 {
            return bad("zoom spacing must be positive and noise sigma non-negative");
        }
        if self.sdt_crop_tau[0] < 0.0 || self.sdt_crop_tau[1] > MAX_CROP_TAU {
            return bad("sdt_crop_tau must lie in [0, 4]");
        }
        if !(0.0..1.0).contains(&self.zoom_size_limit) {
            return bad("zoom_size_limit must lie in [0, 1)");
        }
        let probs = [self.p_histogram_match, self.p_rotate, self.p_zoom, self.p_sdt_crop, self.p_motion_blur, self.p_noise];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if let Some(&k) = self.blur_kernels.iter().find(|&&k| k < 3 || k % 2 == 0) {
            return Err(Error::BadKernel(k));
        }
        if self.blur_kernels.is_empty() && self.p_motion_blur > 0.0 {
            return bad("motion blur enabled without kernels");
        }
        Ok(())
    }

    fn max_abs_angle(&self) -> f64 {
        self.rotation_deg[0].abs().max(self.rotation_deg[1].abs())
    }
}

/// An image with its distance target on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub image: Volume,
    pub sdt: SdtMap,
}

impl Pair {
    pub fn new(image: Volume, sdt: SdtMap) -> Result<Self> {
        image.geometry().ensure_same_grid(sdt.geometry())?;
        Ok(Self { image, sdt })
    }
}

/// Resample both members through a map from output voxel to source voxel.
fn warp(pair: &Pair, geom: Geometry, to_source: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Pair> {
    let dims = pair.image.dims();
    let d_max = pair.sdt.d_max();
    let mut img = Vec::with_capacity(geom.len());
    let mut sdt = Vec::with_capacity(geom.len());
    for i in 0..geom.len() {
        let c = geom.coords(i);
        let src = to_source([c[0] as f64, c[1] as f64, c[2] as f64]);
        img.push(trilinear(pair.image.data(), dims, src, Boundary::Fill(0.0)).clamp(0.0, 1.0));
        sdt.push(trilinear(pair.sdt.data(), dims, src, Boundary::Fill(-d_max as f32)));
    }
    Ok(Pair { image: Volume::new(geom.clone(), img)?, sdt: SdtMap::from_values(geom, sdt, d_max)? })
}

/// `Rz · Ry · Rx` for angles in degrees about the x, y and z axes.
pub fn rotation_matrix(angles_deg: [f64; 3]) -> Matrix3<f64> {
    let [ax, ay, az] = angles_deg.map(f64::to_radians);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ax.cos(), -ax.sin(), 0.0, ax.sin(), ax.cos());
    let ry = Matrix3::new(ay.cos(), 0.0, ay.sin(), 0.0, 1.0, 0.0, -ay.sin(), 0.0, ay.cos());
    let rz = Matrix3::new(az.cos(), -az.sin(), 0.0, az.sin(), az.cos(), 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Rotate image and SDT about the grid centre in physical space.
pub fn rotate(pair: &Pair, angles_deg: [f64; 3], max_abs_deg: f64) -> Result<Pair> {
    if let Some(&a) = angles_deg.iter().find(|a| !(a.abs() <= max_abs_deg)) {
        return Err(Error::AngleOutOfRange(a));
    }
    let geom = pair.image.geometry().clone();
    let s = geom.spacing();
    let dims = geom.dims();
    let centre: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 / 2.0);
    let inv = rotation_matrix(angles_deg).transpose();
    warp(pair, geom, |p| {
        let mm = Vector3::from_fn(|a, _| (p[a] - centre[a]) * s[a]);
        let src = inv * mm;
        std::array::from_fn(|a| src[a] / s[a] + centre[a])
    })
}

/// Resample to an isotropic `new_spacing`, keeping the grid size and centre.
pub fn zoom(pair: &Pair, new_spacing: f64, cfg: &AugmentConfig) -> Result<Pair> {
    let [lo, hi] = cfg.zoom_spacing;
    if !(lo..=hi).contains(&new_spacing) {
        return Err(Error::SpacingOutOfRange(new_spacing));
    }
    let geom = pair.image.geometry();
    let dims = geom.dims();
    let s = geom.spacing();
    let (min_ratio, max_ratio) = (1.0 - cfg.zoom_size_limit, 1.0 / (1.0 - cfg.zoom_size_limit));
    for a in 0..3 {
        let ratio = s[a] / new_spacing;
        if !(min_ratio - 1e-9..=max_ratio + 1e-9).contains(&ratio) {
            let new = (dims[a] as f64 * ratio).round() as usize;
            return Err(Error::SizeConstraintViolated { old: dims[a], new });
        }
    }
    let centre: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 / 2.0);
    let scale: [f64; 3] = std::array::from_fn(|a| new_spacing / s[a]);
    let mut to_old = Matrix4::identity();
    for a in 0..3 {
        to_old[(a, a)] = scale[a];
        to_old[(a, 3)] = centre[a] * (1.0 - scale[a]);
    }
    let out_geom = Geometry::with_affine(dims, [new_spacing; 3], geom.affine() * to_old)?;
    warp(pair, out_geom, |p| std::array::from_fn(|a| (p[a] - centre[a]) * scale[a] + centre[a]))
}

/// Zero the image outside `threshold_mask(sdt, tau)`; the SDT is untouched.
pub fn sdt_crop(pair: &Pair, tau: f64) -> Result<Pair> {
    if !(0.0..=MAX_CROP_TAU).contains(&tau) {
        return Err(Error::TauOutOfRange(tau));
    }
    let keep = threshold_mask(&pair.sdt, tau)?;
    Ok(Pair { image: pair.image.masked(&keep)?, sdt: pair.sdt.clone() })
}

/// Map a continuous coordinate into `[0, n − 1]` by half-sample symmetric reflection.
fn reflect_coord(c: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * n as f64;
    let mut r = (c + 0.5).rem_euclid(period);
    if r > n as f64 {
        r = period - r;
    }
    (r - 0.5).clamp(0.0, (n - 1) as f64)
}

/// Box average of `kernel` samples spaced one voxel apart along `direction`.
pub fn motion_blur(v: &Volume, kernel: usize, direction: [f64; 3], allowed: &[usize]) -> Result<Volume> {
    if kernel < 3 || kernel % 2 == 0 || !allowed.contains(&kernel) {
        return Err(Error::BadKernel(kernel));
    }
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidConfig("motion blur direction must be non-zero".into()));
    }
    let dir = direction.map(|d| d / norm);
    let dims = v.dims();
    let r = (kernel / 2) as isize;
    let mut out = Vec::with_capacity(v.data().len());
    for i in 0..v.data().len() {
        let c = v.geometry().coords(i);
        let mut acc = 0.0f64;
        for k in -r..=r {
            let p = std::array::from_fn(|a| reflect_coord(c[a] as f64 + k as f64 * dir[a], dims[a]));
            acc += trilinear(v.data(), dims, p, Boundary::Clamp) as f64;
        }
        out.push((acc / kernel as f64) as f32);
    }
    v.with_data(out)
}

/// Add seeded Gaussian noise and clamp to `[0, 1]`.
pub fn add_noise<R: Rng>(v: &Volume, sigma: f64, rng: &mut R) -> Result<Volume> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let data = v.data().iter().map(|&x| (x as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32).collect();
    v.with_data(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub kernel: usize,
    pub direction: [f64; 3],
}

/// The transforms drawn for one sample; `None` means skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub sample_index: u64,
    pub histogram_match: bool,
    pub rotation_deg: Option<[f64; 3]>,
    pub zoom_spacing: Option<f64>,
    pub sdt_crop_tau: Option<f64>,
    pub motion_blur: Option<BlurParams>,
    pub noise_sigma: Option<f64>,
    /// Seed of the noise field, so the record alone reproduces the draw.
    pub noise_seed: Option<u64>,
}

/// The rng stream owned by one sample.
pub fn sample_rng(seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_index);
    rng
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Draw the transform parameters for one sample without touching any image.
pub fn draw_record(cfg: &AugmentConfig, spacing: [f64; 3], sample_index: u64) -> Result<AugmentRecord> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.rng_seed, sample_index);
    let histogram_match = rng.random_bool(cfg.p_histogram_match);
    let rotation_deg = rng.random_bool(cfg.p_rotate).then(|| std::array::from_fn(|_| uniform(&mut rng, cfg.rotation_deg)));
    let zoom_spacing = if rng.random_bool(cfg.p_zoom) {
        // spacings that satisfy the size limit on every axis
        let keep = 1.0 - cfg.zoom_size_limit;
        let lo = spacing.iter().map(|s| s * keep).fold(cfg.zoom_spacing[0], f64::max);
        let hi = spacing.iter().map(|s| s / keep).fold(cfg.zoom_spacing[1], f64::min);
        (lo <= hi).then(|| uniform(&mut rng, [lo, hi]))
    } else {
        None
    };
    let sdt_crop_tau = rng.random_bool(cfg.p_sdt_crop).then(|| uniform(&mut rng, cfg.sdt_crop_tau));
    let motion_blur = rng.random_bool(cfg.p_motion_blur).then(|| {
        let kernel = cfg.blur_kernels[rng.random_range(0..cfg.blur_kernels.len())];
        let direction = loop {
            let d: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                break d.map(|x| x / n);
            }
        };
        BlurParams { kernel, direction }
    });
    let (noise_sigma, noise_seed) = if rng.random_bool(cfg.p_noise) {
        (Some(uniform(&mut rng, cfg.noise_sigma)), Some(rng.random()))
    } else {
        (None, None)
    };
    Ok(AugmentRecord {
        sample_index,
        histogram_match,
        rotation_deg,
        zoom_spacing,
        sdt_crop_tau,
        motion_blur,
        noise_sigma,
        noise_seed,
    })
}

/// Apply a drawn record in the fixed order
/// histogram match, rotate, zoom, SDT crop, motion blur, noise.
pub fn apply_record(pair: &Pair, record: &AugmentRecord, cfg: &AugmentConfig, reference: Option<&Histogram>) -> Result<Pair> {
    let mut cur = pair.clone();
    if record.histogram_match {
        if let Some(h) = reference {
            cur.image = histogram_match(&cur.image, h);
        }
    }
    if let Some(angles) = record.rotation_deg {
        cur = rotate(&cur, angles, cfg.max_abs_angle())?;
    }
    if let Some(s) = record.zoom_spacing {
        cur = zoom(&cur, s, cfg)?;
    }
    if let Some(tau) = record.sdt_crop_tau {
        cur = sdt_crop(&cur, tau)?;
    }
    if let Some(b) = &record.motion_blur {
        cur.image = motion_blur(&cur.image, b.kernel, b.direction, &cfg.blur_kernels)?;
    }
    if let (Some(sigma), Some(seed)) = (record.noise_sigma, record.noise_seed) {
        cur.image = add_noise(&cur.image, sigma, &mut ChaCha8Rng::seed_from_u64(seed))?;
    }
    Ok(cur)
}

/// Draw and apply one augmentation; the result depends only on the inputs,
/// `cfg.rng_seed` and `sample_index`.
pub fn random_augment(
    pair: &Pair,
    cfg: &AugmentConfig,
    reference: Option<&Histogram>,
    sample_index: u64,
) -> Result<(Pair, AugmentRecord)> {
    let record = draw_record(cfg, pair.image.spacing(), sample_index)?;
    let out = apply_record(pair, &record, cfg, reference)?;
    Ok((out, record))
}
