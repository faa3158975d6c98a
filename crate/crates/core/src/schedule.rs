//! Learning-rate schedules and the SGD-with-momentum update.

use std::f64::consts::PI;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{GerspError, Result};
use crate::tensor::{ParamSet, Scalar};

/// Cosine annealing with warm restarts, stepped per epoch.
///
/// Defaults: `lr_min = 0.01`, `lr_max = 0.10`, restart every 20 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRestartSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Epochs per restart cycle.
    pub t_max: u32,
    /// Interpolate `t_cur` within an epoch instead of holding it per epoch.
    #[serde(default)]
    pub per_iteration_lr: bool,
}

impl Default for CosineRestartSchedule {
    fn default() -> Self {
        Self {
            lr_min: 0.01,
            lr_max: 0.10,
            t_max: 20,
            per_iteration_lr: false,
        }
    }
}

impl CosineRestartSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(GerspError::Config(format!(
                "cosine schedule needs 0 <= lr_min <= lr_max, got {} / {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.t_max < 1 {
            return Err(GerspError::Config("t_max must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at a global (possibly fractional) epoch position; the
    /// cycle position restarts at zero every `t_max` epochs.
    pub fn lr_at_epoch(&self, epoch: f64) -> f64 {
        let t_max = f64::from(self.t_max);
        let t_cur = epoch.rem_euclid(t_max);
        cosine_restart_lr(t_cur, self).expect("t_cur reduced into range")
    }
}

/// `lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t_cur / t_max))`.
pub fn cosine_restart_lr(t_cur: f64, sched: &CosineRestartSchedule) -> Result<f64> {
    let t_max = f64::from(sched.t_max);
    if !(0.0..=t_max).contains(&t_cur) {
        return Err(GerspError::InvalidInput(format!(
            "t_cur {t_cur} outside [0, {t_max}]"
        )));
    }
    // cos(pi u) written as -sin(pi (u - 1/2)) and applied as a lerp, so the
    // endpoints and the midpoint come out exact.
    let c = -((t_cur / t_max - 0.5) * PI).sin();
    let w = 0.5 * (1.0 + c);
    Ok(sched.lr_min * (1.0 - w) + sched.lr_max * w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<u32>,
    pub gamma: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            milestones: vec![30, 60, 90],
            gamma: 0.1,
        }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GerspError::Config(
                "step milestones must be strictly increasing".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(GerspError::Config(format!(
                "step gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(GerspError::Config("base_lr must be positive".into()));
        }
        Ok(())
    }
}

/// `base_lr * gamma^(milestones <= epoch)`.
pub fn step_lr(epoch: u32, sched: &StepSchedule) -> f64 {
    let passed = sched.milestones.iter().filter(|&&m| m <= epoch).count();
    sched.base_lr * sched.gamma.powi(passed as i32)
}

/// SGD hyper-parameters.
///
/// Defaults: momentum 0.9, weight decay 5e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Skip weight decay for rank-1 tensors (BN affine, biases).
    #[serde(default)]
    pub no_decay_1d: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-5,
            no_decay_1d: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(GerspError::Config(format!(
                "invalid SGD settings: momentum {} weight_decay {}",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state: hyper-parameters, current rate and velocity buffers per
/// parameter group.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub config: SgdConfig,
    velocity: IndexMap<String, ParamSet<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig, lr: f64) -> Self {
        Self {
            lr,
            config,
            velocity: IndexMap::new(),
        }
    }

    pub fn velocity(&self, group: &str) -> Option<&ParamSet<T>> {
        self.velocity.get(group)
    }
}

/// One SGD-with-momentum step on a parameter group:
/// `g = grad + wd * p; v = momentum * v + g; p -= lr * v`.
pub fn sgd_step<T: Scalar>(
    group: &str,
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    params.check_congruent(grads)?;
    let velocity = state
        .velocity
        .entry(group.to_string())
        .or_insert_with(|| params.zeros_like());
    params.check_congruent(velocity)?;
    let lr = T::lit(state.lr);
    let momentum = T::lit(state.config.momentum);
    let wd_all = T::lit(state.config.weight_decay);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let v = velocity.get_mut(name)?;
        let wd = if state.config.no_decay_1d && p.shape().len() == 1 {
            T::zero()
        } else {
            wd_all
        };
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let step = gi + wd * *pi;
            *vi = momentum * *vi + step;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}
