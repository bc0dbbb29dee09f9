use mganet_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates, kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new<T: Element>(cfg: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<T: Element>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<f64>]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *x = T::of(x.as_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap()];
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &p);
        adam.step(&mut p, &[vec![3.0, -0.5]]);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut p = vec![Tensor::new(vec![3], vec![0.5f32, 0.25, -2.0]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &p);
        adam.step(&mut p, &[vec![1.0, 2.0, 3.0]]);
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::new(vec![1], vec![4.0f64]).unwrap()];
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &p);
        for _ in 0..500 {
            let g = 2.0 * (p[0].data()[0] - 1.5);
            adam.step(&mut p, &[vec![g]]);
        }
        assert!((p[0].data()[0] - 1.5).abs() < 1e-2);
    }
}
