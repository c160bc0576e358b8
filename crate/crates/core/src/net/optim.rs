//! AdamW with decoupled weight decay, plus the exponential learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-epoch exponential decay ratio of the learning rate.
    pub gamma: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gamma: 0.995,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr {} must be > 0", self.lr)));
        }
        for (name, v, lo, hi) in [
            ("beta1", self.beta1, 0.0, 1.0),
            ("beta2", self.beta2, 0.0, 1.0),
            ("gamma", self.gamma, 0.0, 1.0),
        ] {
            if !(v > lo && v < hi) {
                return Err(Error::InvalidConfig(format!(
                    "{name} {v} must be in ({lo}, {hi})"
                )));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(
                "weight_decay must be >= 0 and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at an epoch: `lr0 * gamma^epoch`.
pub fn lr_at_epoch(cfg: &OptimConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.gamma.powi(epoch as i32)
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState<E: Element = f64> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
    pub cfg: OptimConfig,
}

impl<E: Element> OptimState<E> {
    pub fn new(cfg: OptimConfig, param_shapes: &[[usize; 5]]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            m: param_shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            step: 0,
            cfg,
        })
    }
}

/// One decoupled AdamW update:
/// `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)`
/// with bias-corrected moments. Rejects non-finite gradients.
pub fn adamw_step<E: Element>(
    params: &mut [Tensor<E>],
    grads: &[Tensor<E>],
    state: &mut OptimState<E>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidConfig(format!("lr {lr} must be > 0")));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(format!(
                "parameter {i} at optimizer step {}",
                state.step + 1
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = E::from_f64(state.cfg.beta1);
    let b2 = E::from_f64(state.cfg.beta2);
    let one = E::one();
    let bc1 = E::from_f64(1.0 - state.cfg.beta1.powi(t));
    let bc2 = E::from_f64(1.0 - state.cfg.beta2.powi(t));
    let eps = E::from_f64(state.cfg.eps);
    let lr_e = E::from_f64(lr);
    let wd = E::from_f64(state.cfg.weight_decay);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adamw: param shape {:?} != grad shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv - lr_e * (m_hat / (v_hat.sqrt() + eps) + wd * *pv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(cfg: OptimConfig) -> OptimState<f64> {
        OptimState::new(cfg, &[[1, 1, 1, 1, 1]]).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut state = scalar_state(cfg);
        let mut params = vec![Tensor::scalar(1.25f64)];
        adamw_step(&mut params, &[Tensor::scalar(0.0)], &mut state, 0.001).unwrap();
        assert_eq!(params[0].item().unwrap(), 1.25);
    }

    #[test]
    fn zero_grad_applies_pure_decay() {
        let mut state = scalar_state(OptimConfig::default());
        let w0 = 2.0f64;
        let mut params = vec![Tensor::scalar(w0)];
        adamw_step(&mut params, &[Tensor::scalar(0.0)], &mut state, 0.001).unwrap();
        // w <- w * (1 - lr * wd) = w * (1 - 1e-5)
        assert!((params[0].item().unwrap() - w0 * (1.0 - 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = OptimConfig::default();
        let mut state = scalar_state(cfg.clone());
        let w0 = 0.5f64;
        let g = 1.0f64;
        let mut params = vec![Tensor::scalar(w0)];
        adamw_step(&mut params, &[Tensor::scalar(g)], &mut state, cfg.lr).unwrap();
        // t=1: m = (1-b1)g, v = (1-b2)g^2; m_hat = g, v_hat = g^2.
        let m_hat = 1.0;
        let v_hat = 1.0f64;
        let want = w0 - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w0);
        assert!((params[0].item().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut state = scalar_state(OptimConfig::default());
        let mut params = vec![Tensor::scalar(1.0f64)];
        let r = adamw_step(&mut params, &[Tensor::scalar(f64::NAN)], &mut state, 0.001);
        assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
        // Parameters untouched on failure.
        assert_eq!(params[0].item().unwrap(), 1.0);
    }

    #[test]
    fn lr_schedule_values() {
        let cfg = OptimConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 0.001);
        assert!((lr_at_epoch(&cfg, 1) - 0.000995).abs() < 1e-18);
        let lr1200 = lr_at_epoch(&cfg, 1200);
        assert!((lr1200 - 2.44e-6).abs() / 2.44e-6 < 0.01, "got {lr1200}");
    }
}
