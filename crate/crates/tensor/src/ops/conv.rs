//! 3D cross-correlation with cubic kernels via im2col + GEMM.
//!
//! Padding is `(k - 1) / 2` on every side, so a stride-1 convolution keeps the
//! spatial size and a stride-`s` one divides it by `s`.

use crate::element::{gemm, Element};
use crate::error::{Result, TensorError};
use crate::tape::Var;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    dims: [usize; 3],
    out_dims: [usize; 3],
    k: usize,
    stride: usize,
}

impl Geometry {
    fn pad(&self) -> isize {
        ((self.k - 1) / 2) as isize
    }

    fn in_plane(&self) -> usize {
        self.dims.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k * self.k
    }

    /// Is this a pointwise stride-1 convolution, whose im2col is the input itself?
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// Output positions `lo..hi` along one axis whose tap `koff` lands inside the input.
fn valid_span(koff: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // input index = o·stride + koff − pad
    let lo = pad.saturating_sub(koff).div_ceil(stride);
    let hi = if n_in + pad > koff { ((n_in + pad - koff - 1) / stride + 1).min(n_out) } else { 0 };
    (lo, hi.max(lo))
}

/// Visit every contiguous run of the unfolding as (column offset, input offset, valid span).
fn for_each_span(g: &Geometry, mut f: impl FnMut(usize, usize, (usize, usize))) {
    let p = g.out_plane();
    let [d0, d1, d2] = g.dims;
    let [o0, o1, o2] = g.out_dims;
    let (k, s, pad) = (g.k, g.stride, g.pad() as usize);
    for c in 0..g.channels {
        for k0 in 0..k {
            let (a_lo, a_hi) = valid_span(k0, pad, s, d0, o0);
            for k1 in 0..k {
                let (b_lo, b_hi) = valid_span(k1, pad, s, d1, o1);
                for k2 in 0..k {
                    let row = ((c * k + k0) * k + k1) * k + k2;
                    let span = valid_span(k2, pad, s, d2, o2);
                    if span.0 >= span.1 {
                        continue;
                    }
                    for a in a_lo..a_hi {
                        let i0 = a * s + k0 - pad;
                        for b in b_lo..b_hi {
                            let i1 = b * s + k1 - pad;
                            let src = c * g.in_plane() + (i0 * d1 + i1) * d2 + k2;
                            f(row * p + (a * o1 + b) * o2, src, span);
                        }
                    }
                }
            }
        }
    }
}

/// Unfold one batch item `[C, D0, D1, D2]` into `[C·k³, P]` columns.
fn im2col<T: Element>(x: &[T], g: &Geometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.col_rows() * g.out_plane()];
    let (s, pad) = (g.stride, g.pad() as usize);
    for_each_span(g, |dst, src, (lo, hi)| {
        // src is the row start shifted by the tap; element o reads src + o·s − pad
        let out = &mut cols[dst + lo..dst + hi];
        if s == 1 {
            out.copy_from_slice(&x[src + lo - pad..src + hi - pad]);
        } else {
            for (j, o) in out.iter_mut().enumerate() {
                *o = x[src + (lo + j) * s - pad];
            }
        }
    });
    cols
}

/// Fold `[C·k³, P]` columns back, accumulating into `dx` (`[C, D0, D1, D2]`).
fn col2im<T: Element>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let (s, pad) = (g.stride, g.pad() as usize);
    for_each_span(g, |dst, src, (lo, hi)| {
        let from = &cols[dst + lo..dst + hi];
        if s == 1 {
            for (d, &v) in dx[src + lo - pad..src + hi - pad].iter_mut().zip(from) {
                *d += v;
            }
        } else {
            for (j, &v) in from.iter().enumerate() {
                dx[src + (lo + j) * s - pad] += v;
            }
        }
    });
}

/// `[O, C, k³]` → `[C, O, k³]` with every tap mirrored, and the geometry of
/// convolving the output gradient with it.
fn flip_kernel<T: Element>(w: &[T], out_ch: usize, g: &Geometry) -> (Vec<T>, Geometry) {
    let taps = g.k * g.k * g.k;
    let mut wt = vec![T::zero(); w.len()];
    for o in 0..out_ch {
        for c in 0..g.channels {
            for t in 0..taps {
                wt[(c * out_ch + o) * taps + taps - 1 - t] = w[(o * g.channels + c) * taps + t];
            }
        }
    }
    (wt, Geometry { channels: out_ch, dims: g.out_dims, out_dims: g.dims, k: g.k, stride: 1 })
}

impl<'t, T: Element> Var<'t, T> {
    /// `[B, C, D0, D1, D2]` ⊛ `[O, C, k, k, k]` + bias `[O]`.
    pub fn conv3d(self, weight: Var<'t, T>, bias: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(TensorError::ShapeMismatch(format!("conv3d input {xs:?}, weight {ws:?}")));
        }
        let (k, out_ch) = (ws[2], ws[0]);
        if ws[3] != k || ws[4] != k || k % 2 == 0 {
            return Err(TensorError::Invalid(format!("kernel must be odd and cubic, got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(TensorError::ChannelMismatch { expected: ws[1], got: xs[1] });
        }
        if bias.shape() != [out_ch] {
            return Err(TensorError::ShapeMismatch(format!("bias {:?} for {out_ch} outputs", bias.shape())));
        }
        if stride == 0 || xs[2..].iter().any(|d| d % stride != 0) {
            return Err(TensorError::NonDivisibleStride { dims: xs[2..].to_vec(), stride });
        }
        let geo = Geometry {
            channels: xs[1],
            dims: [xs[2], xs[3], xs[4]],
            out_dims: [xs[2] / stride, xs[3] / stride, xs[4] / stride],
            k,
            stride,
        };
        let batch = xs[0];
        let (rows, p) = (geo.col_rows(), geo.out_plane());
        let (x, w, b) = (self.value(), weight.value(), bias.value());

        let mut out = vec![T::zero(); batch * out_ch * p];
        for n in 0..batch {
            let xn = &x[n * geo.channels * geo.in_plane()..(n + 1) * geo.channels * geo.in_plane()];
            let on = &mut out[n * out_ch * p..(n + 1) * out_ch * p];
            for (o, row) in on.chunks_exact_mut(p).enumerate() {
                row.fill(b[o]);
            }
            if geo.is_pointwise() {
                gemm(false, false, out_ch, p, rows, T::one(), &w, xn, T::one(), on);
            } else {
                let cols = im2col(xn, &geo);
                gemm(false, false, out_ch, p, rows, T::one(), &w, &cols, T::one(), on);
            }
        }

        let shape = vec![batch, out_ch, geo.out_dims[0], geo.out_dims[1], geo.out_dims[2]];
        Ok(self.tape.push_op(
            shape,
            out,
            &[self.id, weight.id, bias.id],
            Box::new(move |g, needs| {
                let in_len = geo.channels * geo.in_plane();
                let flipped = (needs[0] && geo.stride == 1 && !geo.is_pointwise()).then(|| flip_kernel(&w, out_ch, &geo));
                let mut gx = needs[0].then(|| vec![T::zero(); batch * in_len]);
                let mut gw = needs[1].then(|| vec![T::zero(); out_ch * rows]);
                let mut gb = needs[2].then(|| vec![T::zero(); out_ch]);
                for n in 0..batch {
                    let gn = &g[n * out_ch * p..(n + 1) * out_ch * p];
                    if let Some(gb) = gb.as_mut() {
                        for (o, row) in gn.chunks_exact(p).enumerate() {
                            gb[o] += row.iter().copied().sum();
                        }
                    }
                    let xn = &x[n * in_len..(n + 1) * in_len];
                    if geo.is_pointwise() {
                        if let Some(gw) = gw.as_mut() {
                            gemm(false, true, out_ch, rows, p, T::one(), gn, xn, T::one(), gw);
                        }
                        if let Some(gx) = gx.as_mut() {
                            let gxn = &mut gx[n * in_len..(n + 1) * in_len];
                            gemm(true, false, rows, p, out_ch, T::one(), &w, gn, T::zero(), gxn);
                        }
                        continue;
                    }
                    if let Some(gw) = gw.as_mut() {
                        let cols = im2col(xn, &geo);
                        gemm(false, true, out_ch, rows, p, T::one(), gn, &cols, T::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxn = &mut gx[n * in_len..(n + 1) * in_len];
                        match &flipped {
                            // stride 1: correlate the output gradient with the flipped kernel
                            Some((wt, tgeo)) => {
                                let gcols = im2col(gn, tgeo);
                                gemm(false, false, geo.channels, p, tgeo.col_rows(), T::one(), wt, &gcols, T::zero(), gxn);
                            }
                            None => {
                                let mut gcols = vec![T::zero(); rows * p];
                                gemm(true, false, rows, p, out_ch, T::one(), &w, gn, T::zero(), &mut gcols);
                                col2im(&gcols, &geo, gxn);
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    /// Direct sextuple loop, zero padding.
    fn direct(x: &[f64], dims: [usize; 3], c_in: usize, w: &[f64], c_out: usize, k: usize, s: usize) -> Vec<f64> {
        let pad = (k as isize - 1) / 2;
        let od = [dims[0] / s, dims[1] / s, dims[2] / s];
        let mut out = vec![0.0; c_out * od.iter().product::<usize>()];
        for o in 0..c_out {
            for a in 0..od[0] {
                for b in 0..od[1] {
                    for c in 0..od[2] {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for k0 in 0..k {
                                for k1 in 0..k {
                                    for k2 in 0..k {
                                        let i = [
                                            (a * s + k0) as isize - pad,
                                            (b * s + k1) as isize - pad,
                                            (c * s + k2) as isize - pad,
                                        ];
                                        if i.iter().zip(dims).any(|(&i, d)| i < 0 || i >= d as isize) {
                                            continue;
                                        }
                                        let xi = ((ci * dims[0] + i[0] as usize) * dims[1] + i[1] as usize) * dims[2]
                                            + i[2] as usize;
                                        acc += x[xi] * w[(((o * c_in + ci) * k + k0) * k + k1) * k + k2];
                                    }
                                }
                            }
                        }
                        out[((o * od[0] + a) * od[1] + b) * od[2] + c] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loop() {
        for (k, s) in [(3, 1), (1, 1), (1, 2), (3, 2)] {
            let dims = [4, 2, 6];
            let (ci, co) = (2, 3);
            let x: Vec<f64> = (0..ci * 48).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..co * ci * k * k * k).map(|i| ((i * 5) % 7) as f64 * 0.5 - 1.0).collect();
            let tape = Tape::<f64>::new();
            let xv = tape.constant(Tensor::new(vec![1, ci, 4, 2, 6], x.clone()).unwrap());
            let wv = tape.constant(Tensor::new(vec![co, ci, k, k, k], w.clone()).unwrap());
            let bv = tape.constant(Tensor::zeros(vec![co]));
            let y = xv.conv3d(wv, bv, s).unwrap();
            assert_eq!(y.value().as_ref(), &direct(&x, dims, ci, &w, co, k, s), "k={k} s={s}");
        }
    }

    #[test]
    fn identity_pointwise_kernel() {
        let tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..64).map(|i| i as f32 * 0.25).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 4, 4, 4], data.clone()).unwrap());
        let w = tape.constant(Tensor::full(vec![1, 1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert_eq!(x.conv3d(w, b, 1).unwrap().value().as_ref(), &data);
    }

    #[test]
    fn averaging_kernel_on_constant() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 5, 5, 5], 2.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3, 3], 1.0 / 27.0));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = x.conv3d(w, b, 1).unwrap().value();
        let at = |a: usize, b: usize, c: usize| y[(a * 5 + b) * 5 + c];
        // interior: full window
        assert!((at(2, 2, 2) - 2.0).abs() < 1e-12);
        // face: 18 of 27 taps inside
        assert!((at(0, 2, 2) - 2.0 * 18.0 / 27.0).abs() < 1e-12);
        // corner: 8 of 27
        assert!((at(0, 0, 0) - 2.0 * 8.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![4, 3, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        assert!(matches!(x.conv3d(w, b, 1), Err(crate::TensorError::ChannelMismatch { .. })));
        let w = tape.constant(Tensor::zeros(vec![4, 2, 1, 1, 1]));
        assert!(matches!(x.conv3d(w, b, 2), Err(crate::TensorError::NonDivisibleStride { .. })));
    }
}
