//! Finite-difference checks for every differentiable operator, in f64.

use mganet_tensor::gradcheck::{check, GradReport};
use mganet_tensor::{multi_head_attention, ssim, Projection, QkvProjection, SsimConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
// Components smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-4;

fn random(seed: u64, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn assert_within(report: GradReport, tol: f64, what: &str) {
    assert!(report.checked > 0);
    assert!(report.max_rel_err <= tol, "{what}: rel err {} > {tol} ({report:?})", report.max_rel_err);
}

/// Fixed weights give a non-trivial scalar objective from a tensor output.
fn weighted_sum<'t>(y: mganet_tensor::Var<'t, f64>) -> mganet_tensor::Var<'t, f64> {
    let n = y.len();
    let w = Tensor::new(y.shape(), (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect()).unwrap();
    y.mul(y.tape().constant(w)).unwrap().sum()
}

#[test]
fn conv3d_k3_gradients() {
    let inputs = [
        random(1, vec![1, 2, 4, 4, 4], -1.0, 1.0),
        random(2, vec![3, 2, 3, 3, 3], -0.5, 0.5),
        random(3, vec![3], -0.1, 0.1),
    ];
    let r = check(&inputs, STEP, FLOOR, |_, v| v[0].conv3d(v[1], v[2], 1).unwrap().sum());
    assert_within(r, 1e-4, "conv3d k3 sum");
    let r = check(&inputs, STEP, FLOOR, |_, v| weighted_sum(v[0].conv3d(v[1], v[2], 1).unwrap()));
    assert_within(r, 1e-4, "conv3d k3 weighted");
}

#[test]
fn conv3d_pointwise_and_strided_gradients() {
    for stride in [1, 2] {
        let inputs = [
            random(4, vec![2, 3, 4, 4, 2], -1.0, 1.0),
            random(5, vec![2, 3, 1, 1, 1], -0.5, 0.5),
            random(6, vec![2], -0.1, 0.1),
        ];
        let r = check(&inputs, STEP, FLOOR, |_, v| weighted_sum(v[0].conv3d(v[1], v[2], stride).unwrap()));
        assert_within(r, 1e-4, "conv3d k1");
    }
}

#[test]
fn upsample_and_pool_gradients() {
    let inputs = [random(7, vec![1, 2, 2, 3, 2], -1.0, 1.0)];
    let r = check(&inputs, STEP, FLOOR, |_, v| weighted_sum(v[0].upsample_nearest(2).unwrap()));
    assert_within(r, 1e-6, "upsample");
    let inputs = [random(8, vec![1, 2, 4, 4, 4], -1.0, 1.0)];
    let r = check(&inputs, STEP, FLOOR, |_, v| weighted_sum(v[0].avg_pool(2).unwrap()));
    assert_within(r, 1e-6, "avg_pool");
}

#[test]
fn activation_gradients_away_from_zero() {
    let mut t = random(9, vec![1, 1, 3, 3, 3], -1.0, 1.0);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let r = check(std::slice::from_ref(&t), STEP, FLOOR, |_, v| weighted_sum(v[0].relu()));
    assert_within(r, 1e-6, "relu");
    let r = check(&[t], STEP, FLOOR, |_, v| weighted_sum(v[0].leaky_relu(0.2)));
    assert_within(r, 1e-6, "leaky relu");
}

#[test]
fn elementwise_gradients() {
    let inputs = [random(10, vec![2, 5], -1.0, 1.0), random(11, vec![2, 5], 0.5, 2.0)];
    let r = check(&inputs, STEP, FLOOR, |_, v| {
        let y = v[0].mul(v[1]).unwrap().div(v[1].add_scalar(0.3)).unwrap().sub(v[0]).unwrap();
        weighted_sum(y.concat_channels(v[1]).unwrap().narrow_channels(2, 5).unwrap())
    });
    assert_within(r, 1e-6, "elementwise");
}

#[test]
fn attention_core_gradients() {
    let inputs = [
        random(12, vec![1, 8, 2, 2, 1], -1.0, 1.0),
        random(13, vec![1, 8, 3, 1, 2], -1.0, 1.0),
        random(14, vec![1, 8, 3, 1, 2], -1.0, 1.0),
    ];
    let r = check(&inputs, STEP, FLOOR, |_, v| weighted_sum(v[0].attention(v[1], v[2], 2).unwrap()));
    assert_within(r, 1e-4, "attention");
}

#[test]
fn self_attention_with_fused_projection_gradients() {
    let inputs = [
        random(15, vec![1, 4, 2, 2, 2], -1.0, 1.0),
        random(16, vec![24, 4, 1, 1, 1], -0.5, 0.5),
        random(17, vec![24], -0.1, 0.1),
        random(18, vec![3, 8, 1, 1, 1], -0.5, 0.5),
        random(19, vec![3], -0.1, 0.1),
    ];
    let r = check(&inputs, STEP, FLOOR, |_, v| {
        let proj = QkvProjection::Fused(Projection { weight: v[1], bias: v[2] });
        let out = Projection { weight: v[3], bias: v[4] };
        weighted_sum(multi_head_attention(v[0], v[0], proj, out, 2, 4).unwrap())
    });
    assert_within(r, 1e-4, "self attention");
}

#[test]
fn cross_attention_gradients() {
    let p = |seed, o, i| [random(seed, vec![o, i, 1, 1, 1], -0.5, 0.5), random(seed + 100, vec![o], -0.1, 0.1)];
    let [wq, bq] = p(20, 8, 3);
    let [wk, bk] = p(21, 8, 3);
    let [wv, bv] = p(22, 8, 3);
    let [wo, bo] = p(23, 3, 8);
    let inputs = [
        random(24, vec![1, 3, 2, 2, 2], -1.0, 1.0),
        random(25, vec![1, 3, 2, 2, 2], -1.0, 1.0),
        wq, bq, wk, bk, wv, bv, wo, bo,
    ];
    let r = check(&inputs, STEP, FLOOR, |_, v| {
        let proj = QkvProjection::Split {
            q: Projection { weight: v[2], bias: v[3] },
            k: Projection { weight: v[4], bias: v[5] },
            v: Projection { weight: v[6], bias: v[7] },
        };
        let out = Projection { weight: v[8], bias: v[9] };
        weighted_sum(multi_head_attention(v[0], v[1], proj, out, 4, 2).unwrap())
    });
    assert_within(r, 1e-4, "cross attention");
}

#[test]
fn mse_gradients() {
    let inputs = [random(26, vec![1, 1, 3, 3, 3], 0.0, 1.0), random(27, vec![1, 1, 3, 3, 3], 0.0, 1.0)];
    let r = check(&inputs, STEP, FLOOR, |_, v| v[0].mse(v[1]).unwrap());
    assert_within(r, 1e-6, "mse");
}

#[test]
fn ssim_gradients() {
    let inputs = [random(28, vec![1, 1, 8, 8, 8], 0.0, 1.0), random(29, vec![1, 1, 8, 8, 8], 0.0, 1.0)];
    let cfg = SsimConfig::default();
    let r = check(&inputs, STEP, FLOOR, |_, v| ssim(v[0], v[1], &cfg).unwrap());
    assert_within(r, 1e-3, "ssim");
}
