//! Deterministic intensity conditioning, resizing and reference construction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{copy_box, resize_trilinear};
use crate::sdt::{reference_mask, signed_distance, SdtMap, DEFAULT_D_MAX};
use crate::volume::{BinaryMask, Geometry, Volume};

/// Smallest value a non-background voxel takes after normalization.
pub const NONZERO_FLOOR: f32 = 1e-3;
pub const DEFAULT_BINS: usize = 256;

/// Intensity histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HistogramJson", into = "HistogramJson")]
pub struct Histogram {
    edges: Vec<f64>,
    counts: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HistogramJson {
    edges: Vec<f64>,
    counts: Vec<f64>,
}

impl TryFrom<HistogramJson> for Histogram {
    type Error = Error;
    fn try_from(j: HistogramJson) -> Result<Self> {
        Histogram::new(j.edges, j.counts)
    }
}

impl From<Histogram> for HistogramJson {
    fn from(h: Histogram) -> Self {
        HistogramJson { edges: h.edges, counts: h.counts }
    }
}

impl Histogram {
    pub fn new(edges: Vec<f64>, counts: Vec<f64>) -> Result<Self> {
        if counts.is_empty() || edges.len() != counts.len() + 1 {
            return Err(Error::InvalidConfig(format!("{} edges for {} bins", edges.len(), counts.len())));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig("histogram edges must increase strictly".into()));
        }
        if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidConfig("histogram counts must be finite and non-negative".into()));
        }
        if counts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::EmptyReference);
        }
        Ok(Self { edges, counts })
    }

    /// Normalized histogram of the nonzero voxels of `v` on `n_bins` equal bins over `[0, 1]`.
    pub fn of_volume(v: &Volume, n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::InvalidConfig("n_bins must be positive".into()));
        }
        let mut counts = vec![0.0; n_bins];
        let mut total = 0usize;
        for &x in v.data().iter().filter(|x| **x != 0.0) {
            counts[bin_of(x, n_bins)] += 1.0;
            total += 1;
        }
        if total == 0 {
            return Err(Error::EmptyReference);
        }
        counts.iter_mut().for_each(|c| *c /= total as f64);
        Self::new(uniform_edges(n_bins), counts)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    /// Value at which the piecewise-linear CDF reaches `p ∈ [0, 1]`.
    fn inverse_cdf(&self, p: f64) -> f64 {
        let total: f64 = self.counts.iter().sum();
        let target = p.clamp(0.0, 1.0) * total;
        let mut below = 0.0;
        for (b, &c) in self.counts.iter().enumerate() {
            if c > 0.0 && below + c >= target {
                let t = ((target - below) / c).clamp(0.0, 1.0);
                return self.edges[b] + t * (self.edges[b + 1] - self.edges[b]);
            }
            below += c;
        }
        *self.edges.last().expect("non-empty")
    }
}

fn uniform_edges(n_bins: usize) -> Vec<f64> {
    (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect()
}

fn bin_of(x: f32, n_bins: usize) -> usize {
    ((x.clamp(0.0, 1.0) as f64 * n_bins as f64) as usize).min(n_bins - 1)
}

/// Mean of the per-volume normalized histograms; volumes without signal are skipped.
pub fn average_histogram(volumes: &[Volume], n_bins: usize) -> Result<Histogram> {
    if volumes.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut sum = vec![0.0; n_bins];
    let mut used = 0usize;
    for v in volumes {
        match Histogram::of_volume(v, n_bins) {
            Ok(h) => {
                sum.iter_mut().zip(h.counts()).for_each(|(s, c)| *s += c);
                used += 1;
            }
            Err(Error::EmptyReference) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::EmptyReference);
    }
    sum.iter_mut().for_each(|s| *s /= used as f64);
    Histogram::new(uniform_edges(n_bins), sum)
}

/// Map the nonzero voxels through their mid-rank CDF onto the inverse CDF of `reference`.
pub fn histogram_match(v: &Volume, reference: &Histogram) -> Volume {
    let mut sorted: Vec<f32> = v.data().iter().copied().filter(|x| *x != 0.0).collect();
    if sorted.is_empty() {
        return v.clone();
    }
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len() as f64;
    v.map(|x| {
        if x == 0.0 {
            return 0.0;
        }
        let below = sorted.partition_point(|s| *s < x);
        let through = sorted.partition_point(|s| *s <= x);
        let p = (below as f64 + 0.5 * (through - below) as f64) / n;
        reference.inverse_cdf(p) as f32
    })
}

/// Rescale the nonzero region to `[NONZERO_FLOOR, 1]`; zeros stay zero.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v
        .data()
        .iter()
        .filter(|x| **x != 0.0)
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) {
        return Err(Error::ConstantVolume);
    }
    let span = (hi - lo) as f64;
    let eps = NONZERO_FLOOR as f64;
    Ok(v.map(|x| if x == 0.0 { 0.0 } else { (eps + (1.0 - eps) * (x - lo) as f64 / span) as f32 }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaheConfig {
    pub clip_limit: f64,
    pub tiles: usize,
    pub n_bins: usize,
    /// Equalize each axial slice on its own instead of using 3D tiles.
    pub per_slice: bool,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self { clip_limit: 2.0, tiles: 8, n_bins: DEFAULT_BINS, per_slice: false }
    }
}

/// Contrast-limited adaptive histogram equalization with 3D tiles.
pub fn clahe(v: &Volume, clip: f64, tiles: usize) -> Result<Volume> {
    clahe_with(v, &ClaheConfig { clip_limit: clip, tiles, ..ClaheConfig::default() })
}

/// Tile layout along one axis: boundaries and centres.
struct Tiling {
    starts: Vec<usize>,
    centers: Vec<f64>,
}

impl Tiling {
    fn new(dim: usize, tiles: usize) -> Self {
        let t = tiles.min(dim).max(1);
        let starts: Vec<usize> = (0..=t).map(|i| i * dim / t).collect();
        let centers = starts.windows(2).map(|w| (w[0] + w[1] - 1) as f64 / 2.0).collect();
        Self { starts, centers }
    }

    fn len(&self) -> usize {
        self.centers.len()
    }

    fn tile_of(&self, x: usize) -> usize {
        self.starts.partition_point(|s| *s <= x) - 1
    }

    /// Neighbouring tiles and the weight of the upper one.
    fn blend(&self, x: usize) -> (usize, usize, f64) {
        let x = x as f64;
        let c = &self.centers;
        if x <= c[0] {
            return (0, 0, 0.0);
        }
        if x >= c[c.len() - 1] {
            return (c.len() - 1, c.len() - 1, 0.0);
        }
        let hi = c.partition_point(|v| *v <= x);
        let lo = hi - 1;
        (lo, hi, (x - c[lo]) / (c[hi] - c[lo]))
    }
}

pub fn clahe_with(v: &Volume, cfg: &ClaheConfig) -> Result<Volume> {
    if !(cfg.clip_limit > 0.0) || cfg.tiles == 0 || cfg.n_bins == 0 {
        return Err(Error::InvalidConfig(format!("invalid CLAHE settings {cfg:?}")));
    }
    let dims = v.dims();
    let nb = cfg.n_bins;
    let tz = if cfg.per_slice { dims[2] } else { cfg.tiles };
    let grid = [Tiling::new(dims[0], cfg.tiles), Tiling::new(dims[1], cfg.tiles), Tiling::new(dims[2], tz)];
    let shape = [grid[0].len(), grid[1].len(), grid[2].len()];
    let tile_index = |t: [usize; 3]| t[0] + shape[0] * (t[1] + shape[1] * t[2]);

    let mut hists = vec![vec![0.0f64; nb]; shape.iter().product()];
    for (i, &x) in v.data().iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let c = v.geometry().coords(i);
        let t = std::array::from_fn(|a| grid[a].tile_of(c[a]));
        hists[tile_index(t)][bin_of(x, nb)] += 1.0;
    }
    // None marks a tile without signal; it maps values to themselves.
    let luts: Vec<Option<Vec<f32>>> = hists
        .into_iter()
        .map(|mut h| {
            let total: f64 = h.iter().sum();
            if total == 0.0 {
                return None;
            }
            let limit = (cfg.clip_limit * total / nb as f64).max(1.0);
            let excess: f64 = h.iter().map(|c| (c - limit).max(0.0)).sum();
            h.iter_mut().for_each(|c| *c = c.min(limit) + excess / nb as f64);
            let mut below = 0.0;
            Some(
                h.iter()
                    .map(|c| {
                        let m = (below + 0.5 * c) / total;
                        below += c;
                        m as f32
                    })
                    .collect(),
            )
        })
        .collect();

    let mut out = vec![0f32; v.data().len()];
    for (i, (&x, o)) in v.data().iter().zip(out.iter_mut()).enumerate() {
        if x == 0.0 {
            continue;
        }
        let c = v.geometry().coords(i);
        let b = bin_of(x, nb);
        let blends: [(usize, usize, f64); 3] = std::array::from_fn(|a| grid[a].blend(c[a]));
        let mut acc = 0.0f64;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut t = [0usize; 3];
            for a in 0..3 {
                let (lo, hi, f) = blends[a];
                if corner >> a & 1 == 1 {
                    t[a] = hi;
                    w *= f;
                } else {
                    t[a] = lo;
                    w *= 1.0 - f;
                }
            }
            if w == 0.0 {
                continue;
            }
            let mapped = luts[tile_index(t)].as_ref().map_or(x.clamp(0.0, 1.0), |l| l[b]);
            acc += w * mapped as f64;
        }
        *o = (acc as f32).clamp(0.0, 1.0);
    }
    v.with_data(out)
}

/// Separable Gaussian smoothing with reflected borders; background zeros are kept.
pub fn gaussian_denoise(v: &Volume, sigma_voxels: f64) -> Result<Volume> {
    if !(sigma_voxels > 0.0) {
        return Err(Error::InvalidConfig(format!("denoise sigma {sigma_voxels} must be positive")));
    }
    let radius = (3.0 * sigma_voxels).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma_voxels * sigma_voxels)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let dims = v.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur: Vec<f64> = v.data().iter().map(|x| *x as f64).collect();
    for a in 0..3 {
        let n = dims[a] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, o) in next.iter_mut().enumerate() {
            let p = (i / strides[a] % dims[a]) as isize;
            let base = i - p as usize * strides[a];
            *o = taps
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let q = reflect(p + k as isize - radius, n);
                    w * cur[base + q * strides[a]]
                })
                .sum();
        }
        cur = next;
    }
    let data = v.data().iter().zip(cur).map(|(x, s)| if *x == 0.0 { 0.0 } else { s as f32 }).collect();
    v.with_data(data)
}

/// Half-sample symmetric reflection into `[0, n)`.
pub(crate) fn reflect(mut i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    i = i.rem_euclid(period);
    (if i >= n { period - 1 - i } else { i }) as usize
}

/// Divide out a smooth multiplicative field fitted as a quadratic polynomial
/// to the log intensities of the nonzero voxels.
pub fn flatten_bias(v: &Volume) -> Result<Volume> {
    let dims = v.dims();
    let samples: Vec<(usize, f64)> = v
        .data()
        .iter()
        .enumerate()
        .filter(|(_, x)| **x > 0.0)
        .map(|(i, x)| (i, (*x as f64).ln()))
        .collect();
    const TERMS: usize = 10;
    if samples.len() < TERMS {
        return Ok(v.clone());
    }
    let basis = |i: usize| -> [f64; TERMS] {
        let c = v.geometry().coords(i);
        let u: [f64; 3] = std::array::from_fn(|a| if dims[a] > 1 { 2.0 * c[a] as f64 / (dims[a] - 1) as f64 - 1.0 } else { 0.0 });
        [1.0, u[0], u[1], u[2], u[0] * u[0], u[1] * u[1], u[2] * u[2], u[0] * u[1], u[0] * u[2], u[1] * u[2]]
    };
    let mut ata = DMatrix::<f64>::zeros(TERMS, TERMS);
    let mut atb = DVector::<f64>::zeros(TERMS);
    for &(i, y) in &samples {
        let b = DVector::from_row_slice(&basis(i));
        ata += &b * b.transpose();
        atb += &b * y;
    }
    let Some(coef) = ata.svd(true, true).solve(&atb, 1e-12).ok() else {
        return Ok(v.clone());
    };
    let field = |i: usize| basis(i).iter().zip(coef.iter()).map(|(b, c)| b * c).sum::<f64>();
    // Keep the overall level: only the spatial variation is removed.
    let mean_field = samples.iter().map(|(i, _)| field(*i)).sum::<f64>() / samples.len() as f64;
    let data = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if x > 0.0 { (x as f64 * (mean_field - field(i)).exp()) as f32 } else { x })
        .collect();
    v.with_data(data)
}

/// Everything needed to map a resized, padded volume back onto its source grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PadRecord {
    pub original: Geometry,
    pub scaled_dims: [usize; 3],
    pub pad_before: [usize; 3],
    pub target: usize,
}

impl PadRecord {
    pub fn was_scaled(&self) -> bool {
        self.scaled_dims != self.original.dims()
    }
}

/// Downscale (if needed) so the longest side fits `target`, then zero-pad
/// symmetrically to a `target³` cube.
pub fn resize_pad(v: &Volume, target: usize) -> Result<(Volume, PadRecord)> {
    if target < 8 {
        return Err(Error::InvalidConfig(format!("target size {target} below 8")));
    }
    let dims = v.dims();
    let longest = *dims.iter().max().expect("three dims");
    let scaled_dims: [usize; 3] = if longest > target {
        let f = target as f64 / longest as f64;
        std::array::from_fn(|a| ((dims[a] as f64 * f).round() as usize).clamp(1, target))
    } else {
        dims
    };
    let scaled =
        if scaled_dims == dims { v.data().to_vec() } else { resize_trilinear(v.data(), dims, scaled_dims) };
    let pad_before: [usize; 3] = std::array::from_fn(|a| (target - scaled_dims[a]) / 2);
    let cube = [target; 3];
    let mut data = vec![0f32; target * target * target];
    copy_box(&scaled, scaled_dims, [0; 3], &mut data, cube, pad_before, scaled_dims);

    // padded index -> source index: o = s·(i − before) + s/2 − 1/2
    let ratio: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 / scaled_dims[a] as f64);
    let mut to_source = Matrix4::identity();
    for a in 0..3 {
        to_source[(a, a)] = ratio[a];
        to_source[(a, 3)] = ratio[a] * (0.5 - pad_before[a] as f64) - 0.5;
    }
    let old = v.geometry();
    let spacing = std::array::from_fn(|a| old.spacing()[a] * ratio[a]);
    let geom = Geometry::with_affine(cube, spacing, old.affine() * to_source)?;
    let record = PadRecord { original: old.clone(), scaled_dims, pad_before, target };
    Ok((Volume::new(geom, data)?, record))
}

/// Inverse of [`resize_pad`]: crop the padding and resample onto the original grid.
pub fn unpad(v: &Volume, record: &PadRecord) -> Result<Volume> {
    if v.dims() != [record.target; 3] {
        return Err(Error::GeometryMismatch(format!("expected a {}³ volume, got {:?}", record.target, v.dims())));
    }
    let mut cropped = vec![0f32; record.scaled_dims.iter().product()];
    copy_box(v.data(), v.dims(), record.pad_before, &mut cropped, record.scaled_dims, [0; 3], record.scaled_dims);
    let dims = record.original.dims();
    let data = if record.was_scaled() { resize_trilinear(&cropped, record.scaled_dims, dims) } else { cropped };
    Volume::new(record.original.clone(), data)
}

/// Nearest-grid resampling of a mask through [`resize_pad`] (trilinear, then ≥ 0.5).
pub fn resize_pad_mask(m: &BinaryMask, target: usize) -> Result<(BinaryMask, PadRecord)> {
    let (v, rec) = resize_pad(&m.to_volume(), target)?;
    Ok((BinaryMask::from_fn(v.geometry().clone(), |x, y, z| v.get(x, y, z) >= 0.5), rec))
}

/// The reconstruction target: the image restricted to the 4 mm-margin mask.
pub fn build_reference(v: &Volume, m: &BinaryMask) -> Result<Volume> {
    v.geometry().ensure_same_grid(m.geometry())?;
    v.masked(&reference_mask(m)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// Gaussian denoising width in voxels; `None` disables it.
    pub denoise_sigma: Option<f64>,
    pub bias_correction: bool,
    pub clahe: ClaheConfig,
    pub d_max: f64,
    /// Settings of external conditioning tools this pipeline stands in for, kept for the record.
    pub external_tool_parameters: BTreeMap<String, serde_json::Value>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let mut external = BTreeMap::new();
        external.insert("n4_shrink_factor".to_string(), serde_json::json!(2));
        external.insert("n4_iterations".to_string(), serde_json::json!(50));
        Self {
            target_size: 128,
            denoise_sigma: Some(0.5),
            bias_correction: true,
            clahe: ClaheConfig::default(),
            d_max: DEFAULT_D_MAX,
            external_tool_parameters: external,
        }
    }
}

/// Intensity conditioning followed by resizing: the network input.
pub fn preprocess_image(v: &Volume, cfg: &PreprocessConfig) -> Result<(Volume, PadRecord)> {
    let mut cur = v.clone();
    if let Some(sigma) = cfg.denoise_sigma {
        cur = gaussian_denoise(&cur, sigma)?;
    }
    if cfg.bias_correction {
        cur = flatten_bias(&cur)?;
    }
    cur = normalize_intensity(&cur)?;
    cur = clahe_with(&cur, &cfg.clahe)?;
    resize_pad(&cur, cfg.target_size)
}

/// A fully prepared training sample on the padded cube.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Volume,
    pub mask: BinaryMask,
    pub sdt: SdtMap,
    pub reference: Volume,
    pub record: PadRecord,
}

pub fn prepare_sample(v: &Volume, m: &BinaryMask, cfg: &PreprocessConfig) -> Result<Sample> {
    v.geometry().ensure_same_grid(m.geometry())?;
    let (image, record) = preprocess_image(v, cfg)?;
    let (mask, _) = resize_pad_mask(m, cfg.target_size)?;
    let sdt = signed_distance(&mask, cfg.d_max)?;
    let reference = build_reference(&image, &mask)?;
    Ok(Sample { image, mask, sdt, reference, record })
}
