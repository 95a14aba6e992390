use serde::{Deserialize, Serialize};

use super::param::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }
}

/// Adam over a fixed, ordered list of params. Buffers are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut slot = 0;
        for p in params.iter_mut().filter(|p| p.trainable) {
            if self.moments.len() <= slot {
                self.moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
            }
            let (m, v) = &mut self.moments[slot];
            assert_eq!(m.len(), p.len(), "optimizer reused with different params");
            for i in 0..p.len() {
                let g = p.grad[i] + weight_decay * p.value[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            slot += 1;
        }
    }
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [&mut Param]) {
        for p in params.iter_mut().filter(|p| p.trainable) {
            for (v, g) in p.value.iter_mut().zip(&p.grad) {
                *v -= self.lr * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new(vec![1.0, -1.0]);
        p.grad = vec![0.5, -2.0];
        let mut adam = Adam::new(AdamConfig::with(0.1, 0.0));
        adam.step(&mut [&mut p]);
        // bias-corrected first step is lr * sign(g)
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn buffers_are_skipped() {
        let mut b = Param::buffer(vec![3.0]);
        b.grad = vec![1.0];
        Sgd { lr: 1.0 }.step(&mut [&mut b]);
        Adam::new(AdamConfig::default()).step(&mut [&mut b]);
        assert_eq!(b.value, vec![3.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Param::new(vec![5.0]);
        let mut adam = Adam::new(AdamConfig::with(0.1, 0.0));
        for _ in 0..500 {
            p.grad = vec![2.0 * (p.value[0] - 2.0)];
            adam.step(&mut [&mut p]);
        }
        assert!((p.value[0] - 2.0).abs() < 1e-2);
    }
}
