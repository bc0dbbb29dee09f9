//! The training loop: seeded batches, optional augmentation, Adam updates.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::Path;

use mganet_core::augment::{apply_record, draw_record, AugmentConfig, AugmentRecord, Pair};
use mganet_core::preprocess::{average_histogram, Histogram, DEFAULT_BINS};
use mganet_core::sdt::{threshold_mask, SdtMap};
use mganet_core::{Volume, Error as CoreError};
use mganet_tensor::{Element, Modality, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{ModelError, Result};
use crate::loss::{total_loss, LossBreakdown};
use crate::net::MgaNet;
use crate::optim::{Adam, AdamConfig};

/// Margin of the reconstruction target when no crop was drawn, mm.
const TARGET_MARGIN_MM: f64 = 4.0;
/// Mixed into the run seed for the batch sampler so it never shares a stream with augmentation.
const SAMPLER_SALT: u64 = 0x5eed_ba7c_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 1000,
            optimizer: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(ModelError::InvalidConfig("batch_size and steps must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(ModelError::InvalidConfig(format!("optimizer settings {o:?} out of range")));
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// One training example on the canonical `N³` cube.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Volume,
    pub sdt: SdtMap,
    pub reference: Volume,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Render a history as JSON lines.
pub fn history_jsonl(history: &[StepRecord]) -> String {
    history.iter().map(|r| serde_json::to_string(r).expect("plain numbers serialize") + "\n").collect()
}

/// `[1, 1, nz, ny, nx]` view of a volume.
pub fn volume_tensor<T: Element>(v: &Volume) -> Result<Tensor<T>> {
    let [nx, ny, nz] = v.dims();
    Ok(Tensor::new(vec![1, 1, nz, ny, nx], v.data().iter().map(|&x| T::of(x as f64)).collect())?)
}

fn is_identity(r: &AugmentRecord, have_reference: bool) -> bool {
    !(r.histogram_match && have_reference)
        && r.rotation_deg.is_none()
        && r.zoom_spacing.is_none()
        && r.sdt_crop_tau.is_none()
        && r.motion_blur.is_none()
        && r.noise_sigma.is_none()
}

/// Input, SDT target and reconstruction target for one augmented draw.
///
/// Geometric transforms move all three; intensity transforms touch only the input.
/// A drawn crop tightens the reconstruction target rather than the input.
fn augmented_targets(
    s: &TrainSample,
    record: &AugmentRecord,
    cfg: &AugmentConfig,
    reference: Option<&Histogram>,
) -> Result<(Volume, SdtMap, Volume)> {
    let pair = Pair::new(s.image.clone(), s.sdt.clone())?;
    let input = apply_record(&pair, &AugmentRecord { sdt_crop_tau: None, ..record.clone() }, cfg, reference)?;
    let geometric = AugmentRecord {
        histogram_match: false,
        sdt_crop_tau: None,
        motion_blur: None,
        noise_sigma: None,
        noise_seed: None,
        ..record.clone()
    };
    let moved = apply_record(&pair, &geometric, cfg, None)?;
    let keep = threshold_mask(&moved.sdt, record.sdt_crop_tau.unwrap_or(TARGET_MARGIN_MM))?;
    let target = moved.image.masked(&keep)?.map(|x| x.clamp(0.0, 1.0));
    Ok((input.image, moved.sdt, target))
}

/// Loss and f64 gradients of one sample.
fn sample_gradients(
    net: &MgaNet<f32>,
    image: &Volume,
    sdt: &SdtMap,
    reference: &Volume,
    modality: Modality,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let p = net.bind(&tape, true);
    let x = tape.constant(volume_tensor(image)?);
    let out = net.forward(&p, x, modality)?;
    let sdt_gt = tape.constant(volume_tensor(&sdt.to_volume())?);
    let recon_ref = tape.constant(volume_tensor(reference)?);
    let (total, parts) = total_loss(out.sdt, sdt_gt, out.recon, recon_ref)?;
    let grads = tape.backward(total);
    let g = p.iter().map(|&v| grads.get_or_zeros(v).into_iter().map(|x| x as f64).collect()).collect();
    Ok((parts, g))
}

/// Train `net` in place and return the per-step loss history.
///
/// Each step draws `batch_size` indices with replacement, builds one graph per
/// sample and averages the gradients. Identical un-augmented draws within a step
/// share one evaluation; the result is the same since every pass is deterministic.
/// Checkpoints go to `<dir>/step-NNNNNN` at the configured cadence and to
/// `<dir>/final` at the end.
pub fn train_loop(
    net: &mut MgaNet<f32>,
    data: &[TrainSample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let n = net.config().input_side;
    if let Some(bad) = data.iter().find(|s| s.image.dims() != [n; 3] || s.sdt.dims() != [n; 3] || s.reference.dims() != [n; 3]) {
        return Err(CoreError::GeometryMismatch(format!("sample of dims {:?}, expected {n}³", bad.image.dims())).into());
    }
    let augment = net.config().use_da;
    let aug_cfg = AugmentConfig { rng_seed: cfg.seed, ..cfg.augment.clone() };
    let histogram = if augment && aug_cfg.p_histogram_match > 0.0 {
        let images: Vec<Volume> = data.iter().map(|s| s.image.clone()).collect();
        Some(average_histogram(&images, DEFAULT_BINS)?)
    } else {
        None
    };

    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SALT);
    let mut adam = Adam::new(cfg.optimizer, net.params());
    let mut history = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut sum: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let mut parts = Vec::with_capacity(cfg.batch_size);
        let mut cache: BTreeMap<usize, (LossBreakdown, Vec<Vec<f64>>)> = BTreeMap::new();
        for slot in 0..cfg.batch_size {
            let i = sampler.random_range(0..data.len());
            let s = &data[i];
            let record = if augment {
                let r = draw_record(&aug_cfg, s.image.spacing(), (step * cfg.batch_size + slot) as u64)?;
                (!is_identity(&r, histogram.is_some())).then_some(r)
            } else {
                None
            };
            let (loss, grads) = match record {
                Some(r) => {
                    let (image, sdt, target) = augmented_targets(s, &r, &aug_cfg, histogram.as_ref())?;
                    sample_gradients(net, &image, &sdt, &target, s.modality)?
                }
                None => match cache.entry(i) {
                    Entry::Occupied(e) => e.get().clone(),
                    Entry::Vacant(e) => e.insert(sample_gradients(net, &s.image, &s.sdt, &s.reference, s.modality)?).clone(),
                },
            };
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { step });
            }
            for (acc, g) in sum.iter_mut().zip(&grads) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += scale * x;
                }
            }
            parts.push(loss);
        }
        adam.step(net.params_mut(), &sum);
        history.push(StepRecord { step, loss: LossBreakdown::mean(&parts) });
        if let Some(dir) = checkpoint_dir {
            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                checkpoint::save(&dir.join(format!("step-{done:06}")), net, cfg.seed, done, &history)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        checkpoint::save(&dir.join("final"), net, cfg.seed, cfg.steps, &history)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use mganet_core::preprocess::build_reference;
    use mganet_core::{signed_distance, BinaryMask, Geometry};

    fn sample(n: usize) -> TrainSample {
        let g = Geometry::new([n; 3], [1.0; 3]).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        let r = |x: usize, y: usize, z: usize| ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
        let mask = BinaryMask::from_fn(g.clone(), |x, y, z| r(x, y, z) <= n as f64 / 4.0);
        let image = Volume::from_fn(g, |x, y, z| if r(x, y, z) <= n as f64 / 3.0 { 0.6 } else { 0.1 });
        TrainSample {
            reference: build_reference(&image, &mask).unwrap(),
            sdt: signed_distance(&mask, 5.0).unwrap(),
            image,
            modality: Modality::Mri,
        }
    }

    fn tiny_net() -> MgaNet<f32> {
        MgaNet::build(&ModelConfig { input_side: 8, use_da: false, ..ModelConfig::default() }, 5).unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig { steps, batch_size: 2, optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..TrainConfig::default() }
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let mut net = tiny_net();
        let before = net.params().to_vec();
        let c = TrainConfig { optimizer: AdamConfig { lr: 0.0, ..AdamConfig::default() }, ..cfg(1) };
        let h = train_loop(&mut net, &[sample(8)], &c, None).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(net.params(), before.as_slice());
    }

    #[test]
    fn empty_dataset_and_bad_config_rejected() {
        let mut net = tiny_net();
        assert!(matches!(train_loop(&mut net, &[], &cfg(1), None), Err(ModelError::EmptyDataset)));
        let c = TrainConfig { batch_size: 0, ..cfg(1) };
        assert!(matches!(train_loop(&mut net, &[sample(8)], &c, None), Err(ModelError::InvalidConfig(_))));
        assert!(train_loop(&mut net, &[sample(16)], &cfg(1), None).is_err());
    }

    #[test]
    fn loss_falls_and_runs_repeat() {
        let run = || {
            let mut net = tiny_net();
            let h = train_loop(&mut net, &[sample(8)], &cfg(30), None).unwrap();
            (h, net.checksum())
        };
        let (h, sum) = run();
        assert!(h.last().unwrap().loss.total < h[0].loss.total);
        assert_eq!(run(), (h, sum));
    }

    #[test]
    fn augmented_runs_are_deterministic() {
        let run = || {
            let mut net = MgaNet::build(&ModelConfig { input_side: 8, ..ModelConfig::default() }, 5).unwrap();
            let aug = AugmentConfig { p_rotate: 1.0, p_noise: 1.0, ..AugmentConfig::default() };
            let c = TrainConfig { augment: aug, ..cfg(3) };
            train_loop(&mut net, &[sample(8)], &c, None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_input_raises_non_finite_loss() {
        let mut s = sample(8);
        s.image = s.image.map(|_| f32::NAN);
        let mut net = tiny_net();
        assert!(matches!(train_loop(&mut net, &[s], &cfg(2), None), Err(ModelError::NonFiniteLoss { step: 0 })));
    }

    #[test]
    fn checkpoints_at_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = tiny_net();
        let c = TrainConfig { checkpoint_every: 2, ..cfg(5) };
        train_loop(&mut net, &[sample(8)], &c, Some(dir.path())).unwrap();
        let names: Vec<String> = {
            let mut v: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
            v.sort();
            v
        };
        assert_eq!(names, ["final", "step-000002", "step-000004"]);
        let ck = checkpoint::load(&dir.path().join("final")).unwrap();
        assert_eq!(ck.net.params(), net.params());
        assert_eq!(ck.history.len(), 5);
    }

    #[test]
    fn crop_only_tightens_the_target() {
        let s = sample(16);
        let record = AugmentRecord {
            sample_index: 0,
            histogram_match: false,
            rotation_deg: None,
            zoom_spacing: None,
            sdt_crop_tau: Some(0.0),
            motion_blur: None,
            noise_sigma: None,
            noise_seed: None,
        };
        let (input, sdt, target) = augmented_targets(&s, &record, &AugmentConfig::default(), None).unwrap();
        assert_eq!(input, s.image);
        assert_eq!(sdt, s.sdt);
        let inside = threshold_mask(&s.sdt, 0.0).unwrap();
        assert_eq!(target, s.image.masked(&inside).unwrap());
    }
}
