//! AdamW with decoupled weight decay, and global-norm gradient clipping.
//!
//! One step for a parameter `p` with gradient `g`:
//!
//! ```text
//! p <- p * (1 - lr * weight_decay)
//! m <- beta1 * m + (1 - beta1) * g
//! v <- beta2 * v + (1 - beta2) * g^2
//! p <- p - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: one pair of moment buffers per parameter, matched by
/// position in the slice handed to [`AdamW::step`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.m.get(i).map(Vec::as_slice)
    }

    pub fn second_moment(&self, i: usize) -> Option<&[f64]> {
        self.v.get(i).map(Vec::as_slice)
    }

    /// Applies one update. Gradients are read, never cleared.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Optimizer(format!(
                "optimizer tracks {} parameters, step received {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::Optimizer(format!("parameter {i} has no gradient")));
            }
            if self.m[i].len() != p.len() {
                return Err(Error::Optimizer(format!(
                    "parameter {i} changed size from {} to {}",
                    self.m[i].len(),
                    p.len()
                )));
            }
        }

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                *w *= decay;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Tensor {
        let mut p = Tensor::vector(vec![value]).with_grad();
        p.accumulate_grad(&[grad]).unwrap();
        p
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = scalar_param(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[0.7]);
    }

    #[test]
    fn zero_grad_with_decay_scales_exactly() {
        let mut p = scalar_param(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        });
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[0.7 * (1.0 - 0.1 * 0.01)]);
    }

    #[test]
    fn three_steps_match_scalar_recurrence() {
        // Hand-stepped recurrence with constant gradient 1.0 and no decay.
        // With g constant, m_hat = v_hat^(1/2) = 1 at every step, so each
        // step moves the value by lr / (1 + eps).
        let (lr, eps) = (1e-3, 1e-8);
        let mut expected = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=3 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            expected -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((expected - (0.5 - 3.0 * lr / (1.0 + eps))).abs() < 1e-15);

        let mut p = scalar_param(0.5, 1.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..3 {
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(opt.steps(), 3);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        // grads are left for the caller to clear
        assert_eq!(p.grad().unwrap(), &[1.0]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Tensor::vector(vec![1.0]).with_grad();
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::Optimizer(_))));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = scalar_param(0.0, 3.0);
        let mut b = scalar_param(0.0, 4.0);
        let norm = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-15);
    }
}
