//! SGD / AdamW, gradient-norm clipping and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{GradVector, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    LinearWarmupDecay,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    pub warmup_ratio: f64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-2,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::LinearWarmupDecay,
            warmup_ratio: 0.05,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(LabError::Domain(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(LabError::Domain("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(LabError::Domain("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(LabError::Domain(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(LabError::Domain("clip_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, schedule: LrSchedule, warmup_ratio: f64, lr_base: f64) -> f64 {
    match schedule {
        LrSchedule::Constant => lr_base,
        LrSchedule::LinearWarmupDecay => {
            let warmup = (warmup_ratio * total_steps as f64).floor() as u64;
            if step < warmup {
                lr_base * step as f64 / warmup as f64
            } else if total_steps <= warmup {
                lr_base
            } else {
                let remaining = total_steps.saturating_sub(step);
                lr_base * remaining as f64 / (total_steps - warmup) as f64
            }
        }
    }
}

/// Rescales `grad` to `max_norm` when its norm exceeds it. Returns the
/// pre-clip norm.
pub fn clip_grad_norm(grad: &mut GradVector, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Number of updates applied.
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        let moments = match config.kind {
            OptimizerKind::Adam => n_params,
            OptimizerKind::Sgd => 0,
        };
        Self {
            config,
            t: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// One update with decoupled weight decay.
    pub fn step(&mut self, params: &mut ParamVector, grad: &GradVector, lr: f64) -> Result<()> {
        if params.len() != grad.len() {
            return Err(LabError::Layout("gradient does not match parameters".into()));
        }
        let wd = self.config.weight_decay;
        self.t += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values_mut().iter_mut().zip(grad.values()) {
                    if wd != 0.0 {
                        *p *= 1.0 - lr * wd;
                    }
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for (i, (p, g)) in params.values_mut().iter_mut().zip(grad.values()).enumerate() {
                    if wd != 0.0 {
                        *p *= 1.0 - lr * wd;
                    }
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if !params.is_finite() {
            return Err(LabError::Numeric {
                index: 0,
                what: "parameters became non-finite".into(),
            });
        }
        Ok(())
    }

    /// Direction the next update would move along (before lr and weight
    /// decay) if `grad` were applied now. Plain gradient for SGD.
    pub fn preconditioned_direction(&self, grad: &GradVector) -> GradVector {
        match self.config.kind {
            OptimizerKind::Sgd => grad.clone(),
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let t = self.t + 1;
                let bc1 = 1.0 - b1.powi(t as i32);
                let bc2 = 1.0 - b2.powi(t as i32);
                let mut d = grad.clone();
                for (i, x) in d.values_mut().iter_mut().enumerate() {
                    let g = *x;
                    let m = (b1 * self.m[i] + (1.0 - b1) * g) / bc1;
                    let v = (b2 * self.v[i] + (1.0 - b2) * g * g) / bc2;
                    *x = m / (v.sqrt() + eps);
                }
                d
            }
        }
    }
}
