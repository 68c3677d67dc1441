//! Adam with bias correction and a step-decay learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::unet::{ParamGrads, ParameterSet};
use crate::Real;

/// Hyperparameters; effective learning rate is
/// `base_lr * decay^(step / decay_every)` with `step` counting completed
/// steps from zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 5e-4,
            decay: 0.8,
            decay_every: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.base_lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.decay_every > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!("adam hyperparameters out of range: {self:?}")))
        }
    }

    /// Learning rate used by the step with 0-based index `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.base_lr * fmath::powi(self.decay as Real, (step / self.decay_every) as u64) as f64
    }
}

/// First/second moment buffers mirroring a [`ParameterSet`], plus the step
/// counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    step: usize,
    skipped: usize,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let m = params.tensors().iter().map(|t| vec![0.0; t.values.len()]).collect();
        let v = params.tensors().iter().map(|t| vec![0.0; t.values.len()]).collect();
        Ok(AdamState { cfg, m, v, step: 0, skipped: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Completed steps.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Steps refused because of non-finite gradients.
    pub fn skipped_steps(&self) -> usize {
        self.skipped
    }

    /// One bias-corrected Adam update in place. A non-finite gradient skips
    /// the whole step (parameters and moments untouched) and reports which
    /// tensor offended.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParamGrads) -> Result<()> {
        if params.tensors().len() != grads.tensors().len() {
            return Err(Error::ShapeMismatch { context: "adam step" });
        }
        for (t, g) in params.tensors().iter().zip(grads.tensors()) {
            if t.values.len() != g.values.len() {
                return Err(Error::ShapeMismatch { context: "adam step" });
            }
            if g.values.iter().any(|v| !v.is_finite()) {
                self.skipped += 1;
                return Err(Error::NonFiniteGradient { tensor: t.name.clone() });
            }
        }

        let lr = self.cfg.lr_at(self.step) as Real;
        let b1 = self.cfg.beta1 as Real;
        let b2 = self.cfg.beta2 as Real;
        let eps = self.cfg.eps as Real;
        let t = (self.step + 1) as u64;
        let bc1 = 1.0 as Real - fmath::powi(b1, t);
        let bc2 = 1.0 as Real - fmath::powi(b2, t);

        for ((tensor, grad), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..tensor.values.len() {
                let g = grad.values[i];
                m[i] = b1 * m[i] + (1.0 as Real - b1) * g;
                v[i] = b2 * v[i] + (1.0 as Real - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.values[i] -= lr * m_hat / (fmath::sqrt(v_hat) + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::NetworkConfig;

    fn tiny_params() -> ParameterSet {
        let cfg = NetworkConfig { depth: 1, base_channels: 1, seed: 9, norm_enabled: true };
        crate::unet::init_params(&cfg)
    }

    #[test]
    fn schedule_matches_stated_decay_points() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-4);
        assert_eq!(cfg.lr_at(49), 5e-4);
        assert!((cfg.lr_at(50) - 4e-4).abs() < 1e-19);
        assert!((cfg.lr_at(100) - 3.2e-4).abs() < 1e-19);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut params = tiny_params();
        let before = params.clone();
        let mut grads = ParamGrads::zeros_like(&params);
        for t in grads.tensors_mut() {
            for (i, v) in t.values.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 3.0 } else { -0.25 };
            }
        }
        let mut state = AdamState::new(AdamConfig::default(), &params).unwrap();
        state.step(&mut params, &grads).unwrap();
        // bias-corrected first step: m_hat/sqrt(v_hat) = sign(g) up to eps
        for (t, t0) in params.tensors().iter().zip(before.tensors()) {
            for (i, (&a, &b)) in t.values.iter().zip(t0.values.iter()).enumerate() {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let delta = (a - b) as f64;
                assert!((delta + sign * 5e-4).abs() < 1e-7, "delta {delta}");
            }
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_fixed() {
        let mut params = tiny_params();
        let before = params.clone();
        let grads = ParamGrads::zeros_like(&params);
        let mut state = AdamState::new(AdamConfig::default(), &params).unwrap();
        state.step(&mut params, &grads).unwrap();
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut params = tiny_params();
        let before = params.clone();
        let mut grads = ParamGrads::zeros_like(&params);
        grads.tensors_mut()[1].values[0] = Real::NAN;
        let mut state = AdamState::new(AdamConfig::default(), &params).unwrap();
        let err = state.step(&mut params, &grads).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 0);
        assert_eq!(state.skipped_steps(), 1);
    }
}
