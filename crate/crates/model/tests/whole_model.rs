use mganet_model::checkpoint::{load, save};
use mganet_model::{total_loss, LossBreakdown, MgaNet, ModelConfig, StepRecord};
use mganet_tensor::gradcheck::check;
use mganet_tensor::{Modality, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn every_parameter_receives_gradient() {
    for (mga, spe) in [(true, true), (false, false)] {
        let cfg = ModelConfig { input_side: 8, use_mga: mga, use_spe: spe, ..ModelConfig::default() };
        let net = MgaNet::<f32>::build(&cfg, 3).unwrap().cast::<f64>();
        let tape = Tape::new();
        let p = net.bind(&tape, true);
        let shape = vec![1, 1, 8, 8, 8];
        let x = tape.constant(random(1, shape.clone(), 0.0, 1.0));
        let out = net.forward(&p, x, Modality::Mri).unwrap();
        let sdt_gt = tape.constant(random(2, shape.clone(), -5.0, 5.0));
        let reference = tape.constant(random(3, shape, 0.0, 1.0));
        let (loss, parts) = total_loss(out.sdt, sdt_gt, out.recon, reference).unwrap();
        assert!(parts.is_finite());
        let grads = tape.backward(loss);
        for (spec, v) in net.specs().iter().zip(&p) {
            let g = grads.get_or_zeros(*v);
            assert!(g.iter().all(|x| x.is_finite()), "{} has a non-finite gradient", spec.name);
            let used = mga || !spec.name.starts_with("mga.");
            assert_eq!(g.iter().any(|x| *x != 0.0), used, "{} (mga {mga}, spe {spe})", spec.name);
        }
    }
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    let s = vec![1, 1, 8, 8, 8];
    let inputs = [
        random(4, s.clone(), -4.0, 4.0),
        random(5, s.clone(), -4.0, 4.0),
        random(6, s.clone(), 0.0, 1.0),
        random(7, s, 0.0, 1.0),
    ];
    let r = check(&inputs, 1e-4, 1e-4, |_, v| total_loss(v[0], v[1], v[2], v[3]).unwrap().0);
    assert!(r.checked > 0 && r.max_rel_err <= 1e-3, "{r:?}");
}

#[test]
fn checkpoints_reload_to_identical_predictions() {
    let cfg = ModelConfig { input_side: 8, ..ModelConfig::default() };
    let net = MgaNet::<f32>::build(&cfg, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let history = vec![StepRecord { step: 0, loss: LossBreakdown { l_mask: 1.0, l_mse: 0.5, l_ssim: 0.25, total: 1.75 } }];
    save(dir.path(), &net, 8, 1, &history).unwrap();
    let ck = load(dir.path()).unwrap();
    assert_eq!((ck.seed, ck.step), (8, 1));
    assert_eq!(ck.history, history);
    let x = random(9, vec![1, 1, 8, 8, 8], 0.0, 1.0).cast::<f32>();
    for m in [Modality::Mri, Modality::Ultrasound] {
        assert_eq!(net.predict(&x, m).unwrap(), ck.net.predict(&x, m).unwrap());
    }
}
