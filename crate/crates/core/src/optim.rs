//! Adam with bias correction, plus a global-norm gradient guard.

use serde::{Deserialize, Serialize};

use crate::error::{HtvError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(HtvError::Dimension(format!(
                "adam state for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(HtvError::Dimension(format!(
                    "param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![t(&[1.0, -2.0])];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            opt.update(&mut p, &[t(&[0.0, 0.0])]).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let cfg = AdamConfig::default();
        let g = [0.3, -4.0, 1e-7];
        let mut p = vec![t(&[0.0; 3])];
        Adam::new(cfg, &p).update(&mut p, &[t(&g)]).unwrap();
        for (d, gi) in p[0].data().iter().zip(g) {
            let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((d - expected).abs() < 1e-15, "{d} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = AdamConfig::default();
        let mut p = vec![t(&[0.0])];
        let mut opt = Adam::new(cfg, &p);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0].data()[0];
            opt.update(&mut p, &[t(&[2.5])]).unwrap();
            last = before - p[0].data()[0];
        }
        assert!((last - cfg.lr).abs() < 1e-9 * cfg.lr.max(1.0) + 1e-10, "{last}");
    }

    #[test]
    fn clipping() {
        let mut g = vec![t(&[3.0]), t(&[4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut g = vec![t(&[0.3])];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3]);
    }
}
