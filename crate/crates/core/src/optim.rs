//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with momentum and decoupled-from-loss L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gw), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = mu * *vel + gw + wd * *w;
                *w -= lr * *vel;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let (bc1, bc2, lr) = (T::lit(bc1), T::lit(bc2), T::lit(lr));
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gw), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * gw;
                *vi = b2 * *vi + (one - b2) * gw * gw;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear warmup followed by step decay (x0.1 at each milestone fraction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub warmup_ratio: f64,
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| step as f64 >= m * self.total_steps as f64)
            .count();
        let mut lr = self.base_lr * self.gamma.powi(passed as i32);
        if step < self.warmup_steps {
            let k = step as f64 / self.warmup_steps as f64;
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * k;
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule_decays_at_milestones() {
        let s = StepSchedule {
            base_lr: 0.02,
            total_steps: 100,
            warmup_steps: 0,
            warmup_ratio: 1.0,
            milestones: vec![0.8, 0.9],
            gamma: 0.1,
        };
        assert_eq!(s.lr_at(0), 0.02);
        assert!((s.lr_at(80) - 0.002).abs() < 1e-15);
        assert!((s.lr_at(95) - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("x", Tensor::from_vec(&[1], vec![5.0]));
        let mut opt = Sgd::new(&ps, 0.9, 0.0);
        for _ in 0..200 {
            let g = vec![ps.get(id).scale(2.0)];
            opt.step(&mut ps, &g, 0.05);
        }
        assert!(ps.get(id).item().abs() < 1e-3);
    }
}
