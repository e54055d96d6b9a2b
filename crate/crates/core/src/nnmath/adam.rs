use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Adam hyperparameters. Defaults are the usual `1e-3, 0.9, 0.999, 1e-8`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

/// First/second moment estimates and step counter of one Adam run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
        }
    }

    /// Bias-corrected Adam update of `theta` in place.
    ///
    /// A gradient containing NaN or infinity leaves both the state and
    /// `theta` untouched.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "Adam state has {} entries, theta {} and gradient {}",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((th, g), (m, v)) in theta.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *th -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_theta() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut theta = vec![1.0, -2.0, 3.5];
        s.update(&mut theta, &[0.0; 3]).unwrap();
        assert_eq!(theta, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut theta = vec![0.0];
        s.update(&mut theta, &[1.0]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-18);
        assert!((theta[0] + 0.000999999990).abs() < 1e-12);

        let mut s = AdamState::new(1, AdamConfig::default());
        let mut theta = vec![0.0];
        s.update(&mut theta, &[-1.0]).unwrap();
        assert!((theta[0] + expected).abs() < 1e-18);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut theta = vec![1.0, 1.0];
        let err = s.update(&mut theta, &[0.1, f64::NAN]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(theta, vec![1.0, 1.0]);
        assert_eq!(s.step, 0);
        assert_eq!(s.m, vec![0.0, 0.0]);
    }

    #[test]
    fn deterministic_and_v_nonnegative() {
        let grads = [[0.3, -1.0], [2.0, 0.5], [-0.7, -0.1]];
        let run = || {
            let mut s = AdamState::new(2, AdamConfig::default());
            let mut theta = vec![0.5, -0.5];
            for g in &grads {
                s.update(&mut theta, g).unwrap();
                assert!(s.v.iter().all(|&v| v >= 0.0));
            }
            (s, theta)
        };
        let (s1, t1) = run();
        let (s2, t2) = run();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert_eq!(s1.step, 3);
    }
}
