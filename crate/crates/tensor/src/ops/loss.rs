//! Image-comparison objectives: mean squared error and differentiable SSIM.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Var;

impl<'t, T: Element> Var<'t, T> {
    /// Mean of squared differences, as a one-element node.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&target)?;
        if self.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch(format!("mse {:?} vs {:?}", self.shape(), target.shape())));
        }
        let (a, b) = (self.value(), target.value());
        let n = a.len();
        let inv_n = T::one() / T::of(n as f64);
        let total: T = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.tape.push_op(
            vec![1],
            vec![total * inv_n],
            &[self.id, target.id],
            Box::new(move |g, needs| {
                let scale = T::of(2.0) * g[0] * inv_n;
                let diff: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * scale).collect();
                let gb = needs[1].then(|| diff.iter().map(|&d| -d).collect());
                vec![needs[0].then_some(diff), gb]
            }),
        ))
    }
}

/// Parameters of the local SSIM statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    /// Gaussian window side (odd). Shrinks to the largest odd size that fits.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the data.
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimConfig {
    /// Window side actually used for a volume whose smallest spatial side is `min_dim`.
    pub fn effective_window(&self, min_dim: usize) -> usize {
        let w = self.window.min(min_dim).max(1);
        if w % 2 == 0 {
            w - 1
        } else {
            w
        }
    }

    /// Normalized 1D Gaussian taps for a window of `size`.
    pub fn taps(&self, size: usize) -> Vec<f64> {
        let c = (size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..size)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn gaussian<'t, T: Element>(x: Var<'t, T>, taps: &[T]) -> Result<Var<'t, T>> {
    x.filter_axis_valid(taps, 0)?.filter_axis_valid(taps, 1)?.filter_axis_valid(taps, 2)
}

/// Per-voxel SSIM over the valid (fully covered) region of `[B, C, D0, D1, D2]` inputs.
///
/// The map has spatial sides `D - w + 1` for effective window side `w`.
pub fn ssim_map<'t, T: Element>(a: Var<'t, T>, b: Var<'t, T>, cfg: &SsimConfig) -> Result<Var<'t, T>> {
    a.same_tape(&b)?;
    let shape = a.shape();
    if shape != b.shape() || shape.len() != 5 {
        return Err(TensorError::ShapeMismatch(format!("ssim {:?} vs {:?}", shape, b.shape())));
    }
    let w = cfg.effective_window(shape[2..].iter().copied().min().unwrap_or(1));
    let taps: Vec<T> = cfg.taps(w).into_iter().map(T::of).collect();
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);

    let mu_a = gaussian(a, &taps)?;
    let mu_b = gaussian(b, &taps)?;
    let mu_aa = mu_a.mul(mu_a)?;
    let mu_bb = mu_b.mul(mu_b)?;
    let mu_ab = mu_a.mul(mu_b)?;
    let var_a = gaussian(a.mul(a)?, &taps)?.sub(mu_aa)?;
    let var_b = gaussian(b.mul(b)?, &taps)?.sub(mu_bb)?;
    let cov = gaussian(a.mul(b)?, &taps)?.sub(mu_ab)?;

    let num = mu_ab.mul_scalar(2.0).add_scalar(c1).mul(cov.mul_scalar(2.0).add_scalar(c2))?;
    let den = mu_aa.add(mu_bb)?.add_scalar(c1).mul(var_a.add(var_b)?.add_scalar(c2))?;
    num.div(den)
}

/// Mean local SSIM, in `[-1, 1]`.
pub fn ssim<'t, T: Element>(a: Var<'t, T>, b: Var<'t, T>, cfg: &SsimConfig) -> Result<Var<'t, T>> {
    Ok(ssim_map(a, b, cfg)?.mean())
}
