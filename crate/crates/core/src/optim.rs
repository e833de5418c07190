use serde::{Deserialize, Serialize};

use crate::nn::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, lr: f64, num_params: usize) -> Self {
        Adam {
            config,
            lr,
            step: 0,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
        }
    }

    /// Applies one update to `params` from a flat gradient in visit order.
    pub fn update<P: Params<T> + ?Sized>(&mut self, params: &mut P, grad: &[T]) {
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let c = &self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bias1 = one - T::lit(c.beta1.powi(self.step as i32));
        let bias2 = one - T::lit(c.beta2.powi(self.step as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(c.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut(&mut |p| {
            for (j, w) in p.iter_mut().enumerate() {
                let i = off + j;
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            off += p.len();
        });
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Linear::<f64>::zeros(1, 1);
        let mut opt = Adam::new(AdamConfig::default(), 0.1, p.num_params());
        opt.update(&mut p, &[2.0, -3.0]);
        assert!((p.w[[0, 0]] + 0.1).abs() < 1e-6);
        assert!((p.b[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = Linear::<f64>::zeros(1, 1);
        p.w[[0, 0]] = 5.0;
        let mut opt = Adam::new(AdamConfig::default(), 0.05, 2);
        for _ in 0..2000 {
            let g = [2.0 * (p.w[[0, 0]] - 1.0), 0.0];
            opt.update(&mut p, &g);
        }
        assert!((p.w[[0, 0]] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clipping() {
        let mut g = [3.0f64, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let mut small = [0.3f64];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, [0.3]);
    }
}
