//! Pointwise arithmetic, reductions, activation and channel plumbing.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Var;

fn check_same<T: Element>(a: &Var<'_, T>, b: &Var<'_, T>, op: &str) -> Result<Vec<usize>> {
    a.same_tape(b)?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::ShapeMismatch(format!("{op}: {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

impl<'t, T: Element> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = check_same(&self, &other, "add")?;
        let (a, b) = (self.value(), other.value());
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        Ok(self.tape.push_op(
            shape,
            out,
            &[self.id, other.id],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = check_same(&self, &other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        Ok(self.tape.push_op(
            shape,
            out,
            &[self.id, other.id],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&x| -x).collect())]),
        ))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = check_same(&self, &other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        Ok(self.tape.push_op(
            shape,
            out,
            &[self.id, other.id],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = check_same(&self, &other, "div")?;
        let (a, b) = (self.value(), other.value());
        let out: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect();
        Ok(self.tape.push_op(
            shape,
            out,
            &[self.id, other.id],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &y)| g / y).collect());
                let gb = needs[1].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let out = self.value().iter().map(|&x| x + c).collect();
        self.tape.push_op(self.shape(), out, &[self.id], Box::new(|g, _| vec![Some(g.to_vec())]))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let out = self.value().iter().map(|&x| x * c).collect();
        self.tape.push_op(
            self.shape(),
            out,
            &[self.id],
            Box::new(move |g, _| vec![Some(g.iter().map(|&x| x * c).collect())]),
        )
    }

    pub fn neg(self) -> Var<'t, T> {
        self.mul_scalar(-1.0)
    }

    /// Rectifier with a configurable negative slope (`0` is plain ReLU).
    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let s = T::of(slope);
        let x = self.value();
        let out = x.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect();
        self.tape.push_op(
            self.shape(),
            out,
            &[self.id],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&g, &v)| if v > T::zero() { g } else { g * s })
                        .collect(),
                )]
            }),
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.leaky_relu(0.0)
    }

    pub fn sum(self) -> Var<'t, T> {
        let n = self.len();
        let total = self.value().iter().copied().sum();
        self.tape.push_op(vec![1], vec![total], &[self.id], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.len();
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Reinterpret the same data under a new shape.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                self.shape()
            )));
        }
        let out = self.value().as_ref().clone();
        Ok(self.tape.push_op(shape, out, &[self.id], Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    /// Concatenate two `[B, C, ...]` tensors along the channel axis.
    pub fn concat_channels(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::ShapeMismatch(format!("concat {sa:?} with {sb:?}")));
        }
        let batch = sa[0];
        let plane: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * plane, sb[1] * plane);
        let (a, b) = (self.value(), other.value());
        let mut out = Vec::with_capacity(a.len() + b.len());
        for n in 0..batch {
            out.extend_from_slice(&a[n * ca..(n + 1) * ca]);
            out.extend_from_slice(&b[n * cb..(n + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        Ok(self.tape.push_op(
            shape,
            out,
            &[self.id, other.id],
            Box::new(move |g, _| {
                let mut ga = Vec::with_capacity(batch * ca);
                let mut gb = Vec::with_capacity(batch * cb);
                for n in 0..batch {
                    let base = n * (ca + cb);
                    ga.extend_from_slice(&g[base..base + ca]);
                    gb.extend_from_slice(&g[base + ca..base + ca + cb]);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Channels `start..start + len` of a `[B, C, ...]` tensor.
    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(TensorError::ShapeMismatch(format!("narrow {start}+{len} of {s:?}")));
        }
        let (batch, ch) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        let x = self.value();
        let mut out = Vec::with_capacity(batch * len * plane);
        for n in 0..batch {
            let base = (n * ch + start) * plane;
            out.extend_from_slice(&x[base..base + len * plane]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let total = x.len();
        Ok(self.tape.push_op(
            shape,
            out,
            &[self.id],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); total];
                for n in 0..batch {
                    let base = (n * ch + start) * plane;
                    let src = &g[n * len * plane..(n + 1) * len * plane];
                    gx[base..base + len * plane].copy_from_slice(src);
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
    fn activation_examples() {
        let tape = Tape::<f64>::new();
        let pos = tape.constant(Tensor::new(vec![3], vec![0.0, 1.5, 7.0]).unwrap());
        assert_eq!(pos.relu().value().as_ref(), &vec![0.0, 1.5, 7.0]);
        let neg = tape.constant(Tensor::scalar(-1.0));
        assert_eq!(neg.relu().item(), 0.0);
        assert_eq!(neg.leaky_relu(0.1).item(), -0.1);
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2, 2], (10..18).map(f64::from).collect()).unwrap());
        let c = a.concat_channels(b).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(
            c.value().as_ref(),
            &vec![1.0, 2.0, 10.0, 11.0, 12.0, 13.0, 3.0, 4.0, 14.0, 15.0, 16.0, 17.0]
        );
        assert_eq!(c.narrow_channels(1, 2).unwrap().value().as_ref(), b.value().as_ref());
        assert_eq!(c.narrow_channels(0, 1).unwrap().value().as_ref(), a.value().as_ref());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(a.add(b).is_err());
    }
}
