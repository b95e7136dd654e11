//! LAMB optimizer and the learning-rate / batch-size schedules.
//!
//! LAMB applies Adam-style bias-corrected moment estimates and then rescales
//! each tensor's update by the trust ratio `‖w‖₂ / ‖r‖₂`, making the step size
//! relative to the magnitude of the weights it touches. Moments are kept in
//! `f64` regardless of the parameter precision so long runs do not accumulate
//! rounding drift in the optimizer state.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::params::ModelParams;
use crate::real::Real;

/// Hyperparameters of the LAMB update rule.
#[derive(Debug, Clone, Copy)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.0 }
    }
}

impl LambConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::InvalidConfig("lamb betas must lie in [0, 1)".to_string()));
        }
        if self.eps < 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::InvalidConfig(
                "lamb eps and weight decay must be nonnegative".to_string(),
            ));
        }
        Ok(())
    }
}

/// First/second moment estimates for every model tensor, in canonical order.
#[derive(Debug, Clone)]
pub struct LambState {
    cfg: LambConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl LambState {
    pub fn new<F: Real>(params: &ModelParams<F>, cfg: LambConfig) -> Result<Self, CoreError> {
        cfg.validate()?;
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in params.named_tensors() {
            names.push(name);
            m.push(vec![0.0; t.numel()]);
            v.push(vec![0.0; t.numel()]);
        }
        Ok(Self { cfg, step: 0, names, m, v })
    }

    pub fn config(&self) -> &LambConfig {
        &self.cfg
    }

    /// Number of completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One LAMB update of a single tensor. `m` and `v` are this tensor's moment
/// buffers and `t` is the one-based step index used for bias correction.
pub fn lamb_update_tensor<F: Real>(
    name: &str,
    w: &mut [F],
    g: &[F],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &LambConfig,
) -> Result<(), CoreError> {
    if w.len() != g.len() || w.len() != m.len() || w.len() != v.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "lamb buffers for {} disagree on length",
            name
        )));
    }
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let mut r = vec![0.0f64; w.len()];
    let mut w_sq = 0.0f64;
    let mut r_sq = 0.0f64;
    for i in 0..w.len() {
        let gi = g[i].as_f64();
        if !gi.is_finite() {
            return Err(CoreError::NonFinite(format!("non-finite gradient for {}", name)));
        }
        let wi = w[i].as_f64();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let ri = m_hat / (libm::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * wi;
        r[i] = ri;
        w_sq += wi * wi;
        r_sq += ri * ri;
    }
    let w_norm = libm::sqrt(w_sq);
    let r_norm = libm::sqrt(r_sq);
    let trust = if w_norm == 0.0 || r_norm == 0.0 { 1.0 } else { w_norm / r_norm };
    for i in 0..w.len() {
        w[i] = F::of(w[i].as_f64() - lr * trust * r[i]);
    }
    Ok(())
}

/// One LAMB step over all model tensors. Gradients must come from the same
/// architecture so the canonical tensor order lines up with the state.
pub fn lamb_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut LambState,
    lr: f64,
) -> Result<(), CoreError> {
    if lr <= 0.0 {
        return Err(CoreError::InvalidConfig("learning rate must be positive".to_string()));
    }
    state.step += 1;
    let t = state.step;
    let cfg = state.cfg;
    let gs: Vec<(String, Vec<F>)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, g)| (n, g.data().to_vec()))
        .collect();
    let tensors = params.named_tensors_mut();
    if tensors.len() != state.names.len() || gs.len() != state.names.len() {
        return Err(CoreError::ShapeMismatch("optimizer state does not match model".to_string()));
    }
    for (idx, (name, w)) in tensors.into_iter().enumerate() {
        if name != state.names[idx] || gs[idx].0 != state.names[idx] {
            return Err(CoreError::ShapeMismatch(format!(
                "tensor order mismatch at {}",
                name
            )));
        }
        lamb_update_tensor(
            &name,
            w.data_mut(),
            &gs[idx].1,
            &mut state.m[idx],
            &mut state.v[idx],
            t,
            lr,
            &cfg,
        )?;
    }
    Ok(())
}

/// Cosine decay from `lr_init` to `lr_final` over `total_steps`, clamped to
/// `lr_final` afterwards.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr_init: f64, lr_final: f64, total_steps: u64) -> Result<Self, CoreError> {
        if total_steps < 1 {
            return Err(CoreError::InvalidConfig("schedule needs at least one step".to_string()));
        }
        if !(lr_init.is_finite() && lr_final.is_finite()) || lr_init <= 0.0 || lr_final < 0.0 {
            return Err(CoreError::InvalidConfig("learning rates must be positive".to_string()));
        }
        Ok(Self { lr_init, lr_final, total_steps })
    }

    /// Pre-training phase rates.
    pub fn pretrain(total_steps: u64) -> Result<Self, CoreError> {
        Self::new(3e-3, 3e-4, total_steps)
    }

    /// Fine-tuning phase rates.
    pub fn finetune(total_steps: u64) -> Result<Self, CoreError> {
        Self::new(1e-4, 1e-5, total_steps)
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        if t >= self.total_steps {
            return self.lr_final;
        }
        let frac = t as f64 / self.total_steps as f64;
        self.lr_final
            + 0.5 * (self.lr_init - self.lr_final) * (1.0 + libm::cos(core::f64::consts::PI * frac))
    }
}

/// Piecewise-constant batch-size schedule: the size in effect at `step` is the
/// last entry whose start does not exceed it.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    entries: Vec<(u64, usize)>,
}

impl BatchSchedule {
    pub fn new(entries: Vec<(u64, usize)>) -> Result<Self, CoreError> {
        if entries.is_empty() {
            return Err(CoreError::InvalidConfig("batch schedule is empty".to_string()));
        }
        if entries[0].0 != 0 {
            return Err(CoreError::InvalidConfig(
                "batch schedule must start at step 0".to_string(),
            ));
        }
        for pair in entries.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(CoreError::InvalidConfig(
                    "batch schedule steps must strictly increase".to_string(),
                ));
            }
        }
        if entries.iter().any(|&(_, b)| b == 0) {
            return Err(CoreError::InvalidConfig("batch sizes must be positive".to_string()));
        }
        Ok(Self { entries })
    }

    /// Batch starts at 4 and doubles once at step 12000.
    pub fn pretrain_default() -> Self {
        Self::new(vec![(0, 4), (12000, 8)]).expect("static schedule is valid")
    }

    pub fn entries(&self) -> &[(u64, usize)] {
        &self.entries
    }

    pub fn size_at(&self, step: u64) -> usize {
        let mut size = self.entries[0].1;
        for &(start, b) in &self.entries {
            if start <= step {
                size = b;
            } else {
                break;
            }
        }
        size
    }
}
