use mganet_tensor::{ssim, Element, SsimConfig, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// The three loss terms and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mask: f64,
    pub l_mse: f64,
    pub l_ssim: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_mask, self.l_mse, self.l_ssim, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        LossBreakdown { l_mask: sum(|p| p.l_mask), l_mse: sum(|p| p.l_mse), l_ssim: sum(|p| p.l_ssim), total: sum(|p| p.total) }
    }
}

/// `mse(sdt) + mse(recon) + (1 − ssim(recon))`, differentiable in both predictions.
pub fn total_loss<'t, T: Element>(
    sdt_pred: Var<'t, T>,
    sdt_gt: Var<'t, T>,
    recon_pred: Var<'t, T>,
    recon_ref: Var<'t, T>,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let l_mask = sdt_pred.mse(sdt_gt)?;
    let l_mse = recon_pred.mse(recon_ref)?;
    let l_ssim = ssim(recon_pred, recon_ref, &SsimConfig::default())?.neg().add_scalar(1.0);
    let total = l_mask.add(l_mse)?.add(l_ssim)?;
    let parts = LossBreakdown {
        l_mask: l_mask.item().as_f64(),
        l_mse: l_mse.item().as_f64(),
        l_ssim: l_ssim.item().as_f64(),
        total: total.item().as_f64(),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mganet_tensor::{Tape, Tensor};

    fn field(seed: usize) -> Tensor<f64> {
        Tensor::new(vec![1, 1, 6, 6, 6], (0..216).map(|i| ((i * 31 + seed * 17) % 23) as f64 / 23.0).collect()).unwrap()
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let tape = Tape::new();
        let s = tape.constant(field(1).map(|v| 10.0 * v - 5.0));
        let r = tape.constant(field(2));
        let (_, l) = total_loss(s, s, r, r).unwrap();
        assert!(l.total.abs() < 1e-6);
    }

    #[test]
    fn constant_sdt_offset_costs_its_square() {
        let tape = Tape::new();
        let gt = field(3);
        let s_gt = tape.constant(gt.clone());
        let s_pred = tape.constant(gt.map(|v| v + 0.7));
        let r = tape.constant(field(4));
        let (_, l) = total_loss(s_pred, s_gt, r, r).unwrap();
        assert!((l.total - 0.49).abs() < 1e-9);
        assert!((l.l_mask - 0.49).abs() < 1e-9);
        assert_eq!(l.l_mse, 0.0);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let tape = Tape::new();
        let (_, l) = total_loss(
            tape.constant(field(5)),
            tape.constant(field(6)),
            tape.constant(field(7)),
            tape.constant(field(8)),
        )
        .unwrap();
        assert!((l.total - (l.l_mask + l.l_mse + l.l_ssim)).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&l.l_ssim));
    }
}
