use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// Adam hyperparameters with a step-decay learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The learning rate is multiplied by `decay_factor` every `decay_every` steps.
    pub decay_every: u64,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_every: 20_000, decay_factor: 0.5 }
    }
}

impl AdamConfig {
    /// Rate used for the update made at zero-based step `step`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        self.lr * self.decay_factor.powi((step / self.decay_every.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lr", self.lr > 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0),
            ("decay_every", self.decay_every > 0),
            ("decay_factor", self.decay_factor > 0.0 && self.decay_factor <= 1.0),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(Error::config(format!("optim.{field}"), "out of range"));
            }
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor plus the number of
/// updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update; returns the learning rate used.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [&mut Tensor<T>], grads: &[Vec<T>]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} params, {} grads, {} moment buffers", params.len(), grads.len(), self.m.len()),
            ));
        }
        let lr = cfg.learning_rate(self.step);
        let t = (self.step + 1) as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
        let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
        let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != m.len() || p.numel() != m.len() {
                return Err(Error::shape("adam", format!("gradient of {} for a tensor of {}", g.len(), p.numel())));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_every_twenty_thousand_steps() {
        let c = AdamConfig::default();
        assert_eq!(c.learning_rate(0), 0.001);
        assert_eq!(c.learning_rate(19_999), 0.001);
        assert_eq!(c.learning_rate(20_000), 0.0005);
        assert_eq!(c.learning_rate(40_000), 0.00025);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::vector(vec![1.0f64, -2.0, 3.0]);
        let before = p.clone();
        let mut opt = OptimState::new([&p]);
        opt.update(&AdamConfig::default(), &mut [&mut p], &[vec![0.0; 3]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = Tensor::vector(vec![0.0f64, 0.0]);
        let mut opt = OptimState::new([&p]);
        opt.update(&AdamConfig::default(), &mut [&mut p], &[vec![0.5, -3.0]]).unwrap();
        assert!((p.data()[0] + 1e-3).abs() < 1e-9);
        assert!((p.data()[1] - 1e-3).abs() < 1e-9);
    }
}
