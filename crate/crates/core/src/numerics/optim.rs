//! AdamW with decoupled weight decay and a linear warmup schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Micro-batches whose gradients are averaged into one update.
    pub grad_accum: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            grad_accum: 1,
            batch_size: 8,
        }
    }
}

impl OptimizerConfig {
    /// The full-scale recipe: lr 5e-5, betas (0.9, 0.999), no weight decay,
    /// 1000 warmup steps, batch 6 with 3-way accumulation (effective 18).
    pub fn full_scale() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 1000,
            grad_accum: 3,
            batch_size: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.grad_accum < 1 || self.batch_size < 1 {
            return Err(Error::Config("grad_accum and batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and eps must be positive, weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` (1-based): linear warmup, then flat.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied so far; drives bias correction.
    pub t: u64,
}

/// Optimizer state keyed by parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops moments for every parameter whose path starts with `prefix`.
    pub fn reset_prefix(&mut self, prefix: &str) {
        self.moments.retain(|k, _| !k.starts_with(prefix));
    }
}

/// One AdamW update over every parameter that has a gradient.
///
/// `step` drives the warmup schedule. Bias correction uses each parameter's
/// own update count, so moments carried across stages stay correctly scaled
/// while the schedule restarts.
pub fn adamw_step(
    params: &mut BTreeMap<String, &mut Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamWState,
    cfg: &OptimizerConfig,
    step: usize,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Config("optimizer steps are 1-based".into()));
    }
    for (name, g) in grads {
        if !g.is_finite() {
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::NonFinite(format!(
                "gradient of {name} ({bad} of {} entries) at step {step}",
                g.len()
            )));
        }
    }
    let lr = cfg.lr_at(step);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} for {name} of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
            t: 0,
        });
        mom.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(mom.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(mom.t as i32);
        let pd = p.data_mut();
        let md = mom.m.data_mut();
        let vd = mom.v.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            if cfg.weight_decay != 0.0 {
                pd[i] -= lr * cfg.weight_decay * pd[i];
            }
            pd[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (BTreeMap<String, Tensor>, AdamWState) {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::vector(vec![v]).unwrap());
        (m, AdamWState::new())
    }

    fn step_once(
        store: &mut BTreeMap<String, Tensor>,
        state: &mut AdamWState,
        g: f64,
        cfg: &OptimizerConfig,
        step: usize,
    ) -> Result<()> {
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![g]).unwrap());
        let mut view: BTreeMap<String, &mut Tensor> =
            store.iter_mut().map(|(k, v)| (k.clone(), v)).collect();
        adamw_step(&mut view, &grads, state, cfg, step)
    }

    #[test]
    fn zero_gradient_without_decay_is_bit_identical() {
        let (mut store, mut state) = one_param(0.123_456_789);
        let before = store["w"].clone();
        let cfg = OptimizerConfig::default();
        for s in 1..=5 {
            step_once(&mut store, &mut state, 0.0, &cfg, s).unwrap();
        }
        assert_eq!(store["w"], before);
    }

    #[test]
    fn warmup_endpoint_reaches_peak() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.lr_at(cfg.warmup_steps), cfg.lr);
        assert_eq!(cfg.lr_at(cfg.warmup_steps + 500), cfg.lr);
        assert!((cfg.lr_at(50) - cfg.lr / 2.0).abs() < 1e-18);
        let flat = OptimizerConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(flat.lr_at(1), flat.lr);
    }

    /// Textbook scalar AdamW written out longhand, independent of the
    /// implementation above.
    fn scalar_adamw_reference(p0: f64, g: f64, steps: usize, cfg: &OptimizerConfig) -> Vec<f64> {
        let (mut p, mut m, mut v) = (p0, 0.0f64, 0.0f64);
        let mut out = Vec::new();
        for t in 1..=steps {
            let lr = if t < cfg.warmup_steps {
                cfg.lr * t as f64 / cfg.warmup_steps as f64
            } else {
                cfg.lr
            };
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            p = p - lr * cfg.weight_decay * p - lr * mh / (vh.sqrt() + cfg.eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn scalar_trajectory_matches_reference() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            warmup_steps: 2,
            weight_decay: 0.01,
            ..OptimizerConfig::default()
        };
        let expected = scalar_adamw_reference(1.0, 1.0, 3, &cfg);
        let (mut store, mut state) = one_param(1.0);
        for (s, want) in expected.iter().enumerate() {
            step_once(&mut store, &mut state, 1.0, &cfg, s + 1).unwrap();
            assert!((store["w"].data()[0] - want).abs() < 1e-15);
        }
        // With g = 1 constant, m̂ = v̂ = 1, so each step moves by ≈ lr_t.
        // Step 1: lr/2, step 2 and 3: lr, plus the small decay term.
        let p1 = 1.0 - 0.05 * 0.01 - 0.05 / (1.0 + 1e-8);
        assert!((expected[0] - p1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut store, mut state) = one_param(1.0);
        let err = step_once(&mut store, &mut state, f64::NAN, &OptimizerConfig::default(), 1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(store["w"].data(), &[1.0]);
    }

    #[test]
    fn config_validation() {
        let bad = OptimizerConfig {
            beta1: 1.0,
            ..OptimizerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig {
            grad_accum: 0,
            ..OptimizerConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(OptimizerConfig::full_scale().validate().is_ok());
    }
}
