//! Scaled dot-product multi-head attention over flattened voxel sequences.
//!
//! Tensors stay channel-major (`[B, H·D, L]` with the spatial axes flattened in
//! row-major order), so one head is a `D×L` row-major block and every product
//! below is a strided GEMM.

use crate::element::{gemm, lane_dot, lane_sum, Element};
use crate::error::{Result, TensorError};
use crate::tape::Var;

fn seq_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::ShapeMismatch(format!("attention operand {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product::<usize>().max(1)))
}

fn softmax_rows<T: Element>(s: &mut [T], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = *v - max);
        T::exp_in_place(row);
        let inv = T::one() / lane_sum(row);
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Row-stochastic attention matrices `[B, H, Lq, Lk]` for the given queries and keys.
pub fn attention_weights<T: Element>(q: &[T], k: &[T], batch: usize, heads: usize, head_dim: usize, lq: usize, lk: usize) -> Vec<T> {
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    let width = heads * head_dim;
    let mut probs = vec![T::zero(); batch * heads * lq * lk];
    for n in 0..batch {
        for h in 0..heads {
            let qh = &q[(n * width + h * head_dim) * lq..][..head_dim * lq];
            let kh = &k[(n * width + h * head_dim) * lk..][..head_dim * lk];
            let p = &mut probs[(n * heads + h) * lq * lk..][..lq * lk];
            gemm(true, false, lq, lk, head_dim, scale, qh, kh, T::zero(), p);
            softmax_rows(p, lk);
        }
    }
    probs
}

impl<'t, T: Element> Var<'t, T> {
    /// `softmax(QᵀK/√d)·V` per head. `self` is Q (`[B, H·D, ...]`); `k` and `v`
    /// share a (possibly different) sequence length. Output has Q's shape.
    pub fn attention(self, k: Var<'t, T>, v: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
        self.same_tape(&k)?;
        self.same_tape(&v)?;
        let q_shape = self.shape();
        let (batch, width, lq) = seq_dims(&q_shape)?;
        let (kb, kw, lk) = seq_dims(&k.shape())?;
        let (vb, vw, lv) = seq_dims(&v.shape())?;
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::ShapeMismatch(format!("{width} channels over {heads} heads")));
        }
        if kb != batch || vb != batch || kw != width || vw != width || lv != lk {
            return Err(TensorError::ShapeMismatch(format!(
                "q {q_shape:?}, k {:?}, v {:?}",
                k.shape(),
                v.shape()
            )));
        }
        let hd = width / heads;
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let probs = attention_weights(&qv, &kv, batch, heads, hd, lq, lk);
        let mut out = vec![T::zero(); batch * width * lq];
        for n in 0..batch {
            for h in 0..heads {
                let vh = &vv[(n * width + h * hd) * lk..][..hd * lk];
                let p = &probs[(n * heads + h) * lq * lk..][..lq * lk];
                let oh = &mut out[(n * width + h * hd) * lq..][..hd * lq];
                gemm(false, true, hd, lq, lk, T::one(), vh, p, T::zero(), oh);
            }
        }
        let scale = T::one() / T::of(hd as f64).sqrt();
        Ok(self.tape.push_op(
            q_shape,
            out,
            &[self.id, k.id, v.id],
            Box::new(move |g, needs| {
                let mut gq = vec![T::zero(); batch * width * lq];
                let mut gk = vec![T::zero(); batch * width * lk];
                let mut gv = vec![T::zero(); batch * width * lk];
                let mut dp = vec![T::zero(); lq * lk];
                for n in 0..batch {
                    for h in 0..heads {
                        let off_q = (n * width + h * hd) * lq;
                        let off_k = (n * width + h * hd) * lk;
                        let go = &g[off_q..][..hd * lq];
                        let p = &probs[(n * heads + h) * lq * lk..][..lq * lk];
                        let vh = &vv[off_k..][..hd * lk];
                        if needs[2] {
                            gemm(false, false, hd, lk, lq, T::one(), go, p, T::zero(), &mut gv[off_k..][..hd * lk]);
                        }
                        if !(needs[0] || needs[1]) {
                            continue;
                        }
                        gemm(true, false, lq, lk, hd, T::one(), go, vh, T::zero(), &mut dp);
                        // softmax backward, folded with the score scale
                        for (dp_row, p_row) in dp.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
                            let dot = lane_dot(dp_row, p_row);
                            for (d, &pv) in dp_row.iter_mut().zip(p_row) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        if needs[0] {
                            let kh = &kv[off_k..][..hd * lk];
                            gemm(false, true, hd, lq, lk, T::one(), kh, &dp, T::zero(), &mut gq[off_q..][..hd * lq]);
                        }
                        if needs[1] {
                            let qh = &qv[off_q..][..hd * lq];
                            gemm(false, false, hd, lk, lq, T::one(), qh, &dp, T::zero(), &mut gk[off_k..][..hd * lk]);
                        }
                    }
                }
                vec![needs[0].then_some(gq), needs[1].then_some(gk), needs[2].then_some(gv)]
            }),
        ))
    }
}

/// A pointwise (1³ kernel) projection: weight `[out, in, 1, 1, 1]`, bias `[out]`.
#[derive(Debug, Clone, Copy)]
pub struct Projection<'t, T> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Element> Projection<'t, T> {
    pub fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv3d(self.weight, self.bias, 1)
    }
}

/// How queries, keys and values are produced from their sources.
#[derive(Debug, Clone, Copy)]
pub enum QkvProjection<'t, T> {
    /// One `C → 3·H·D` projection, split into Q, K, V (self-attention).
    Fused(Projection<'t, T>),
    /// Independent projections; Q reads the query source, K and V the key/value source.
    Split { q: Projection<'t, T>, k: Projection<'t, T>, v: Projection<'t, T> },
}

/// Multi-head attention between two volumetric feature maps.
///
/// With [`QkvProjection::Fused`] the query and key/value sources must be the
/// same tensor. The result has the query source's spatial shape and the output
/// projection's channel count.
pub fn multi_head_attention<'t, T: Element>(
    q_src: Var<'t, T>,
    kv_src: Var<'t, T>,
    proj: QkvProjection<'t, T>,
    out_proj: Projection<'t, T>,
    heads: usize,
    head_dim: usize,
) -> Result<Var<'t, T>> {
    let inner = heads * head_dim;
    let (q, k, v) = match proj {
        QkvProjection::Fused(p) => {
            if q_src.id != kv_src.id {
                return Err(TensorError::Invalid("fused QKV projection needs a single source".into()));
            }
            let qkv = p.apply(q_src)?;
            if qkv.shape()[1] != 3 * inner {
                return Err(TensorError::ShapeMismatch(format!(
                    "fused projection emits {} channels, need {}",
                    qkv.shape()[1],
                    3 * inner
                )));
            }
            (qkv.narrow_channels(0, inner)?, qkv.narrow_channels(inner, inner)?, qkv.narrow_channels(2 * inner, inner)?)
        }
        QkvProjection::Split { q, k, v } => (q.apply(q_src)?, k.apply(kv_src)?, v.apply(kv_src)?),
    };
    if q.shape()[1] != inner || k.shape()[1] != inner || v.shape()[1] != inner {
        return Err(TensorError::ShapeMismatch(format!("projections must emit {inner} channels")));
    }
    out_proj.apply(q.attention(k, v, heads)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, vec![2, 8, 5]);
        let k = rand_tensor(&mut rng, vec![2, 8, 7]);
        let p = attention_weights(q.data(), k.data(), 2, 2, 4, 5, 7);
        for row in p.chunks_exact(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_sequence_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::<f64>::new();
        let src = tape.constant(rand_tensor(&mut rng, vec![1, 6, 1, 1, 1]));
        let fused = Projection {
            weight: tape.constant(rand_tensor(&mut rng, vec![24, 6, 1, 1, 1])),
            bias: tape.constant(rand_tensor(&mut rng, vec![24])),
        };
        let out = Projection {
            weight: tape.constant(rand_tensor(&mut rng, vec![3, 8, 1, 1, 1])),
            bias: tape.constant(rand_tensor(&mut rng, vec![3])),
        };
        let y = multi_head_attention(src, src, QkvProjection::Fused(fused), out, 2, 4).unwrap();
        let v = fused.apply(src).unwrap().narrow_channels(16, 8).unwrap();
        let want = out.apply(v).unwrap();
        for (a, b) in y.value().iter().zip(want.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_keys_average_the_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::<f64>::new();
        let q = tape.constant(rand_tensor(&mut rng, vec![1, 4, 3]));
        let k = tape.constant(Tensor::full(vec![1, 4, 6], 0.3));
        let vt = rand_tensor(&mut rng, vec![1, 4, 6]);
        let v = tape.constant(vt.clone());
        let y = q.attention(k, v, 2).unwrap().value();
        for c in 0..4 {
            let mean: f64 = vt.data()[c * 6..(c + 1) * 6].iter().sum::<f64>() / 6.0;
            for i in 0..3 {
                assert!((y[c * 3 + i] - mean).abs() < 1e-12);
            }
        }
    }
}
