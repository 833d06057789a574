use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// AdamW with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update `params` in place. Entries where `mask` is false are left untouched.
    pub fn step_masked<T: Scalar>(&mut self, params: &mut [T], grads: &[T], mask: Option<&[bool]>) {
        assert_eq!(params.len(), self.m.len(), "optimizer size");
        assert_eq!(grads.len(), self.m.len(), "gradient size");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grads[i].to_f64_lossy();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mut p = params[i].to_f64_lossy();
            p *= 1.0 - self.lr * self.weight_decay;
            p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            params[i] = T::lit(p);
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[T]) {
        self.step_masked(params, grads, None);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(2, 0.1).with_weight_decay(0.0);
        let mut p = vec![1.0f64, -1.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(1, 0.05).with_weight_decay(0.0);
        let mut p = vec![5.0f64];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 2.0)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn mask_freezes_entries() {
        let mut opt = AdamW::new(2, 0.1);
        let mut p = vec![1.0f32, 1.0];
        opt.step_masked(&mut p, &[1.0, 1.0], Some(&[false, true]));
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1.0);
    }
}
