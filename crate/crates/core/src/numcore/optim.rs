use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SGD hyper-parameters with a cosine learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Length of the cosine schedule. Training loops that own the step
    /// count overwrite this with their own total.
    pub total_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the gradients so their joint L2 norm is at most this.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr_max: 1e-2, lr_min: 1e-4, total_steps: 1000, momentum: 0.9, weight_decay: 0.0, clip_norm: Some(5.0) }
    }
}

impl SgdConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::config(format!("{name}: need 0 < lr_min <= lr_max")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{name}: momentum must lie in [0, 1)")));
        }
        if self.total_steps == 0 {
            return Err(Error::config(format!("{name}: total_steps must be positive")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("{name}: weight_decay must be >= 0")));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::config(format!("{name}: clip_norm must be > 0")));
        }
        Ok(())
    }

    pub fn with_total_steps(&self, total_steps: usize) -> Self {
        Self { total_steps: total_steps.max(1), ..self.clone() }
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, cfg: &SgdConfig) -> Result<f64> {
    if cfg.total_steps == 0 || step > cfg.total_steps {
        return Err(Error::contract(format!(
            "cosine_lr step {} outside [0, {}]",
            step, cfg.total_steps
        )));
    }
    let progress = step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * progress).cos()))
}

/// Momentum SGD: `v <- mu * v + g + wd * p`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    clip_norm: Option<f64>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: &SgdConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(
                "sgd_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) {
                return Err(Error::dim(
                    "sgd_step",
                    format!("parameter {} shape {:?} vs gradient {:?}", i, p.shape(), g.shape()),
                ));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        } else if self.velocity.len() != grads.len() {
            return Err(Error::dim("sgd_step", "parameter count changed between steps"));
        }

        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric { op: "sgd_step" });
        }
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let pd = p.data_mut();
            for ((pv, gv), vv) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                let grad = gv * factor + self.weight_decay * *pv;
                *vv = self.momentum * *vv + grad;
                *pv -= lr * *vv;
            }
            p.ensure_finite("sgd_step")?;
        }
        Ok(())
    }
}
