use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamGroup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// Backbone layers train at `base_lr / backbone_lr_divisor`.
    pub backbone_lr_divisor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Apply weight decay to batch-norm scale/shift as well.
    pub decay_norm_params: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.02,
            backbone_lr_divisor: 10.0,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            decay_norm_params: true,
            batch_size: 20,
            epochs: 60,
            lr_step: 30,
            lr_gamma: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.base_lr, self.backbone_lr_divisor];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("optim", "learning rate and divisor must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("optim", "momentum must lie in [0, 1) and weight decay be non-negative"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma < 1.0) {
            return Err(Error::invalid("optim", format!("lr_gamma must lie in (0, 1), got {}", self.lr_gamma)));
        }
        if self.batch_size < 2 || self.epochs == 0 || self.lr_step == 0 {
            return Err(Error::invalid("optim", "batch size must be at least 2; epochs and lr_step positive"));
        }
        Ok(())
    }
}

/// Step schedule: `base_lr · γ^⌊epoch / step⌋`, divided for the backbone.
pub fn lr_at(epoch: usize, group: ParamGroup, config: &OptimConfig) -> f64 {
    let lr = config.base_lr * config.lr_gamma.powi((epoch / config.lr_step) as i32);
    match group {
        ParamGroup::New => lr,
        ParamGroup::Backbone => lr / config.backbone_lr_divisor,
    }
}

/// One SGD update in place.
///
/// `g = grad + decay·param`, `v = μ·v + g`, then Nesterov
/// `param −= lr·(g + μ·v)` or classical `param −= lr·v`.
pub fn sgd_step(
    param: &mut [f32],
    grad: &[f32],
    velocity: &mut [f32],
    lr: f64,
    weight_decay: f64,
    config: &OptimConfig,
) -> Result<()> {
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(Error::shape("sgd_step", &[param.len()], &[grad.len(), velocity.len()]));
    }
    let (lr, mu, wd) = (lr as f32, config.momentum as f32, weight_decay as f32);
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = *g + wd * *p;
        *v = mu * *v + g;
        let step = if config.nesterov { g + mu * *v } else { *v };
        *p -= lr * step;
    }
    Ok(())
}
