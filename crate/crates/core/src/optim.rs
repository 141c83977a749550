//! First-order optimizers over flat parameter buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::Param;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[Param], momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= lr * *vi;
            }
        }
    }
}

/// Adam over a single flat buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            x[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut params = vec![Param {
            name: String::from("w"),
            value: Tensor::from_vec(vec![1.0]),
        }];
        let mut opt = Sgd::new(&params, 0.9);
        let g = [Tensor::from_vec(vec![1.0])];
        opt.step(&mut params, &g, 0.1);
        assert!((params[0].value.item() - 0.9).abs() < 1e-15);
        opt.step(&mut params, &g, 0.1);
        // v = 0.9 * 1 + 1 = 1.9
        assert!((params[0].value.item() - (0.9 - 0.19)).abs() < 1e-15);
    }
}
