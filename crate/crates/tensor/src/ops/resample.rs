//! Spatial resampling and separable filtering on `[B, C, D0, D1, D2]` tensors.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Var;

fn spatial(shape: &[usize], op: &str) -> Result<(usize, [usize; 3])> {
    if shape.len() != 5 {
        return Err(TensorError::ShapeMismatch(format!("{op} expects [B, C, D0, D1, D2], got {shape:?}")));
    }
    Ok((shape[0] * shape[1], [shape[2], shape[3], shape[4]]))
}

impl<'t, T: Element> Var<'t, T> {
    /// Replicate every voxel into a `factor³` block.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (planes, [d0, d1, d2]) = spatial(&shape, "upsample")?;
        if factor == 0 {
            return Err(TensorError::Invalid("upsample factor must be positive".into()));
        }
        let f = factor;
        let (u0, u1, u2) = (d0 * f, d1 * f, d2 * f);
        let x = self.value();
        let mut out = vec![T::zero(); planes * u0 * u1 * u2];
        for pl in 0..planes {
            let src = &x[pl * d0 * d1 * d2..];
            let dst = &mut out[pl * u0 * u1 * u2..];
            for a in 0..u0 {
                for b in 0..u1 {
                    let s_row = &src[((a / f) * d1 + b / f) * d2..][..d2];
                    let d_row = &mut dst[(a * u1 + b) * u2..][..u2];
                    for (c, v) in d_row.iter_mut().enumerate() {
                        *v = s_row[c / f];
                    }
                }
            }
        }
        let out_shape = vec![shape[0], shape[1], u0, u1, u2];
        Ok(self.tape.push_op(
            out_shape,
            out,
            &[self.id],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); planes * d0 * d1 * d2];
                for pl in 0..planes {
                    let src = &g[pl * u0 * u1 * u2..];
                    let dst = &mut gx[pl * d0 * d1 * d2..];
                    for a in 0..u0 {
                        for b in 0..u1 {
                            let g_row = &src[(a * u1 + b) * u2..][..u2];
                            let x_row = &mut dst[((a / f) * d1 + b / f) * d2..][..d2];
                            for (c, &v) in g_row.iter().enumerate() {
                                x_row[c / f] += v;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean over non-overlapping `factor³` blocks.
    pub fn avg_pool(self, factor: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (planes, [d0, d1, d2]) = spatial(&shape, "avg_pool")?;
        let f = factor;
        if f == 0 || d0 % f != 0 || d1 % f != 0 || d2 % f != 0 {
            return Err(TensorError::NonDivisibleStride { dims: shape[2..].to_vec(), stride: f });
        }
        let (p0, p1, p2) = (d0 / f, d1 / f, d2 / f);
        let scale = T::one() / T::of((f * f * f) as f64);
        let x = self.value();
        let mut out = vec![T::zero(); planes * p0 * p1 * p2];
        for pl in 0..planes {
            let src = &x[pl * d0 * d1 * d2..];
            let dst = &mut out[pl * p0 * p1 * p2..];
            for a in 0..d0 {
                for b in 0..d1 {
                    for c in 0..d2 {
                        dst[((a / f) * p1 + b / f) * p2 + c / f] += src[(a * d1 + b) * d2 + c] * scale;
                    }
                }
            }
        }
        let out_shape = vec![shape[0], shape[1], p0, p1, p2];
        Ok(self.tape.push_op(
            out_shape,
            out,
            &[self.id],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); planes * d0 * d1 * d2];
                for pl in 0..planes {
                    let src = &g[pl * p0 * p1 * p2..];
                    let dst = &mut gx[pl * d0 * d1 * d2..];
                    for a in 0..d0 {
                        for b in 0..d1 {
                            for c in 0..d2 {
                                dst[(a * d1 + b) * d2 + c] = src[((a / f) * p1 + b / f) * p2 + c / f] * scale;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Valid (unpadded) correlation with a 1D kernel along spatial `axis` (0..3).
    pub fn filter_axis_valid(self, kernel: &[T], axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        spatial(&shape, "filter")?;
        let dim_index = 2 + axis;
        let klen = kernel.len();
        if axis > 2 || klen == 0 || klen > shape[dim_index] {
            return Err(TensorError::Invalid(format!(
                "kernel of {klen} taps on axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..dim_index].iter().product();
        let inner: usize = shape[dim_index + 1..].iter().product();
        let d = shape[dim_index];
        let od = d - klen + 1;
        let x = self.value();
        let kernel = kernel.to_vec();
        let mut out = vec![T::zero(); outer * od * inner];
        for o in 0..outer {
            for i in 0..od {
                let dst = &mut out[(o * od + i) * inner..][..inner];
                for (t, &wt) in kernel.iter().enumerate() {
                    let src = &x[(o * d + i + t) * inner..][..inner];
                    dst.iter_mut().zip(src).for_each(|(y, &v)| *y += wt * v);
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[dim_index] = od;
        Ok(self.tape.push_op(
            out_shape,
            out,
            &[self.id],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * d * inner];
                for o in 0..outer {
                    for i in 0..od {
                        let src = &g[(o * od + i) * inner..][..inner];
                        for (t, &wt) in kernel.iter().enumerate() {
                            let dst = &mut gx[(o * d + i + t) * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(y, &v)| *y += wt * v);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn single_voxel_becomes_block() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 1, 1, 1], 7.0));
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2, 2]);
        assert!(y.value().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn upsample_then_stride_two_identity_recovers_input() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 4).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(Tensor::new(vec![1, 2, 3, 2, 4], data.clone()).unwrap());
        let mut eye = vec![0.0; 4];
        eye[0] = 1.0;
        eye[3] = 1.0;
        let w = tape.constant(Tensor::new(vec![2, 2, 1, 1, 1], eye).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = x.upsample_nearest(2).unwrap().conv3d(w, b, 2).unwrap();
        assert_eq!(y.value().as_ref(), &data);
    }

    #[test]
    fn pool_of_upsample_is_identity() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..8).map(f64::from).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2, 2], data.clone()).unwrap());
        let y = x.upsample_nearest(4).unwrap().avg_pool(4).unwrap();
        assert_eq!(y.value().as_ref(), &data);
    }

    #[test]
    fn valid_filter_shrinks_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let y = x.filter_axis_valid(&[1.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1, 3]);
        assert_eq!(y.value().as_ref(), &vec![-2.0, -2.0, -2.0]);
    }
}
