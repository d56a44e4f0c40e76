use serde::{Deserialize, Serialize};

use super::params::ParamVector;

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = Some(clip_norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Returns the (pre-clip) gradient norm.
    pub fn step(&mut self, params: &mut ParamVector, grad: &[f64]) -> f64 {
        assert_eq!(grad.len(), params.len(), "gradient length");
        assert_eq!(self.m.len(), params.len(), "optimizer built for another parameter vector");
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.values_mut().iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g * scale;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut pv = ParamVector::new();
        pv.add("x", 2, 1, vec![3.0, -2.0]);
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = pv.values().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut pv, &g);
        }
        assert!(pv.values().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_gradient_leaves_params_untouched() {
        let mut pv = ParamVector::new();
        pv.add("x", 1, 1, vec![0.7]);
        let mut opt = Adam::new(1, 0.1);
        opt.step(&mut pv, &[0.0]);
        assert_eq!(pv.values(), &[0.7]);
    }
}
