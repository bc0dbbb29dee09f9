//! Segmentation, reconstruction and volumetry measures.

use std::fmt::Write as _;

use mganet_tensor::{ssim, SsimConfig, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdt::{squared_distance_to, threshold_mask, SdtMap};
use crate::volume::{BinaryMask, Geometry, Volume};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub dice: f64,
    pub recall: f64,
    pub accuracy: f64,
}

/// Overlap scores; accuracy counts every voxel of the grid.
pub fn segmentation_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegmentationScores> {
    pred.geometry().ensure_same_grid(gt.geometry())?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => {}
        }
    }
    if tp + fneg == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let total = pred.data().len();
    Ok(SegmentationScores {
        dice: 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64,
        recall: tp as f64 / (tp + fneg) as f64,
        accuracy: (total - fp - fneg) as f64 / total as f64,
    })
}

/// Mask voxels with at least one 6-neighbour outside the mask; the grid
/// border counts as outside.
pub fn surface(m: &BinaryMask) -> Vec<bool> {
    let g = m.geometry();
    let d = g.dims();
    (0..g.len())
        .map(|i| {
            if m.data()[i] == 0 {
                return false;
            }
            let c = g.coords(i);
            (0..3).any(|a| {
                let lo = c[a] == 0 || {
                    let mut n = c;
                    n[a] -= 1;
                    m.data()[g.index(n[0], n[1], n[2])] == 0
                };
                let hi = c[a] + 1 == d[a] || {
                    let mut n = c;
                    n[a] += 1;
                    m.data()[g.index(n[0], n[1], n[2])] == 0
                };
                lo || hi
            })
        })
        .collect()
}

fn check_degenerate(m: &BinaryMask) -> Result<()> {
    let n = m.count();
    if n == 0 || n == m.data().len() {
        Err(Error::DegenerateMask)
    } else {
        Ok(())
    }
}

/// Mean distance (mm) from each surface voxel of `from` to the nearest surface voxel of `to`.
pub fn directed_surface_distance(from: &BinaryMask, to: &BinaryMask) -> Result<f64> {
    from.geometry().ensure_same_grid(to.geometry())?;
    check_degenerate(from)?;
    check_degenerate(to)?;
    let target = surface(to);
    let d2 = squared_distance_to(to.geometry(), |i| target[i]);
    let src = surface(from);
    let (sum, n) = src
        .iter()
        .zip(&d2)
        .filter(|(s, _)| **s)
        .fold((0.0, 0usize), |(sum, n), (_, d)| (sum + d.sqrt(), n + 1));
    Ok(sum / n as f64)
}

/// Symmetric mean surface distance in mm.
pub fn mean_surface_distance(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(0.5 * (directed_surface_distance(pred, gt)? + directed_surface_distance(gt, pred)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionScores {
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn as_tensor(v: &Volume) -> Result<Tensor<f64>> {
    let [nx, ny, nz] = v.dims();
    Ok(Tensor::new(vec![1, 1, nz, ny, nx], v.data().iter().map(|x| *x as f64).collect())?)
}

fn ssim_of(a: &Volume, b: &Volume) -> Result<f64> {
    let tape = Tape::new();
    let s = ssim(tape.constant(as_tensor(a)?), tape.constant(as_tensor(b)?), &SsimConfig::default())?;
    Ok(s.item())
}

/// PSNR (data range 1) and SSIM over the whole volume.
pub fn reconstruction_metrics(pred: &Volume, reference: &Volume) -> Result<ReconstructionScores> {
    pred.geometry().ensure_same_grid(reference.geometry())?;
    let mse = pred.data().iter().zip(reference.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
        / pred.data().len() as f64;
    Ok(ReconstructionScores { psnr_db: psnr_from_mse(mse), ssim: ssim_of(pred, reference)? })
}

/// Crop to the bounding box of `m`.
fn crop_to(v: &Volume, m: &BinaryMask) -> Result<Volume> {
    let g = m.geometry();
    let mut lo = g.dims();
    let mut hi = [0usize; 3];
    for i in (0..g.len()).filter(|&i| m.data()[i] == 1) {
        let c = g.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let dims: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let geom = Geometry::new(dims, g.spacing())?;
    Ok(Volume::from_fn(geom, |x, y, z| v.get(x + lo[0], y + lo[1], z + lo[2])))
}

/// PSNR over the voxels of `mask`; SSIM over the mask's bounding box.
pub fn reconstruction_metrics_masked(pred: &Volume, reference: &Volume, mask: &BinaryMask) -> Result<ReconstructionScores> {
    pred.geometry().ensure_same_grid(reference.geometry())?;
    pred.geometry().ensure_same_grid(mask.geometry())?;
    if mask.count() == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .zip(mask.data())
        .filter(|(_, m)| **m == 1)
        .map(|((a, b), _)| ((a - b) as f64).powi(2))
        .sum();
    let psnr_db = psnr_from_mse(sq / mask.count() as f64);
    Ok(ReconstructionScores { psnr_db, ssim: ssim_of(&crop_to(pred, mask)?, &crop_to(reference, mask)?)? })
}

/// Brain volume in mL.
pub fn tbv_ml(m: &BinaryMask) -> f64 {
    m.count() as f64 * m.geometry().voxel_volume() / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub rmse_ml: f64,
    pub r2: f64,
}

/// RMSE and coefficient of determination of `(predicted, observed)` pairs.
pub fn tbv_and_regression(pairs: &[(f64, f64)]) -> Result<Regression> {
    if pairs.len() < 2 {
        return Err(Error::TooFewPairs(pairs.len()));
    }
    let n = pairs.len() as f64;
    let ss_res: f64 = pairs.iter().map(|(p, o)| (p - o).powi(2)).sum();
    let mean_obs = pairs.iter().map(|(_, o)| o).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|(_, o)| (o - mean_obs).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(Regression { rmse_ml: (ss_res / n).sqrt(), r2: 1.0 - ss_res / ss_tot })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub dice: f64,
    pub recall: f64,
}

/// Dice and recall of the thresholded prediction at each `tau`.
pub fn sensitivity_sweep(sdt_pred: &SdtMap, gt: &BinaryMask, taus: &[f64]) -> Result<Vec<SweepRow>> {
    if taus.is_empty() {
        return Err(Error::InvalidConfig("empty threshold grid".into()));
    }
    taus.iter()
        .map(|&tau| {
            let s = segmentation_metrics(&threshold_mask(sdt_pred, tau)?, gt)?;
            Ok(SweepRow { tau, dice: s.dice, recall: s.recall })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>6}  {:>8}  {:>8}\n", "tau", "dice", "recall");
    for r in rows {
        let _ = writeln!(out, "{:>6.2}  {:>8.4}  {:>8.4}", r.tau, r.dice, r.recall);
    }
    out
}

/// Everything measured for one case; reconstruction and volumetry are optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub dice: f64,
    pub msd_mm: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub tbv_pred_ml: f64,
    pub tbv_obs_ml: f64,
}

/// Evaluate one predicted mask (and optionally a reconstruction) against ground truth.
pub fn evaluate_case(
    case: &str,
    pred: &BinaryMask,
    gt: &BinaryMask,
    recon: Option<(&Volume, &Volume)>,
) -> Result<CaseMetrics> {
    let seg = segmentation_metrics(pred, gt)?;
    let msd_mm = if pred.count() == 0 { f64::INFINITY } else { mean_surface_distance(pred, gt)? };
    let rec = recon.map(|(p, r)| reconstruction_metrics(p, r)).transpose()?;
    Ok(CaseMetrics {
        case: case.to_string(),
        dice: seg.dice,
        msd_mm,
        recall: seg.recall,
        accuracy: seg.accuracy,
        psnr_db: rec.map(|r| r.psnr_db),
        ssim: rec.map(|r| r.ssim),
        tbv_pred_ml: tbv_ml(pred),
        tbv_obs_ml: tbv_ml(gt),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Some(Self { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = f.precision().unwrap_or(2);
        write!(f, "{:.p$}({:.p$})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dice: Option<MeanStd>,
    pub msd_mm: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub accuracy: Option<MeanStd>,
    pub psnr_db: Option<MeanStd>,
    pub ssim: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    pub summary: Summary,
    /// Predicted-vs-observed volume fit; needs at least two cases with varying volumes.
    pub regression: Option<Regression>,
}

impl MetricReport {
    pub fn new(cases: Vec<CaseMetrics>) -> Self {
        let col = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| MeanStd::of(&cases.iter().filter_map(f).collect::<Vec<_>>());
        let summary = Summary {
            dice: col(&|c| Some(c.dice)),
            msd_mm: col(&|c| Some(c.msd_mm).filter(|v| v.is_finite())),
            recall: col(&|c| Some(c.recall)),
            accuracy: col(&|c| Some(c.accuracy)),
            psnr_db: col(&|c| c.psnr_db),
            ssim: col(&|c| c.ssim),
        };
        let pairs: Vec<(f64, f64)> = cases.iter().map(|c| (c.tbv_pred_ml, c.tbv_obs_ml)).collect();
        let regression = tbv_and_regression(&pairs).ok();
        Self { cases, summary, regression }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Aligned text table, one row per case plus a mean(std) row.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
        let width = self.cases.iter().map(|c| c.case.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{:<width$}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}  {:>10}  {:>10}\n",
            "case", "dice", "msd_mm", "recall", "accuracy", "psnr_db", "ssim", "tbv_pred", "tbv_obs"
        );
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{:<width$}  {:>12.4}  {:>12.4}  {:>12.4}  {:>12.4}  {:>12}  {:>12}  {:>10.2}  {:>10.2}",
                c.case,
                c.dice,
                c.msd_mm,
                c.recall,
                c.accuracy,
                opt(c.psnr_db, 2),
                opt(c.ssim, 4),
                c.tbv_pred_ml,
                c.tbv_obs_ml
            );
        }
        let s = &self.summary;
        let ms = |m: Option<MeanStd>| m.map_or("-".to_string(), |m| format!("{m:.2}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}",
            "mean(std)",
            ms(s.dice),
            ms(s.msd_mm),
            ms(s.recall),
            ms(s.accuracy),
            ms(s.psnr_db),
            ms(s.ssim)
        );
        if let Some(r) = self.regression {
            let _ = writeln!(out, "tbv rmse {:.2} mL, r2 {:.3}", r.rmse_ml, r.r2);
        }
        out
    }
}
