use serde::{Deserialize, Serialize};

use super::model::{Gradients, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Non-improving validation epochs before the learning rate is cut.
    pub lr_patience: usize,
    /// Non-improving validation epochs before training stops.
    pub stop_patience: usize,
    pub lr_divisor: f64,
    pub lr_floor: f64,
    /// An epoch improves only if its loss is below `best - plateau_epsilon`.
    pub plateau_epsilon: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_patience: 3,
            stop_patience: 6,
            lr_divisor: 10.0,
            lr_floor: 1e-8,
            plateau_epsilon: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochLimit,
    Plateau,
    LrFloor,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Plateau,
    LrDropped,
    Stop(StopReason),
}

/// Momentum buffers plus the validation-plateau schedule.
///
/// Two counters track non-improving epochs: `lr_plateau` resets when the
/// learning rate is cut, `stall` only resets on improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub learning_rate: f64,
    velocity: Vec<Vec<f64>>,
    best_val_loss: f64,
    lr_plateau: usize,
    stall: usize,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, params: &ModelParams) -> Self {
        Self {
            config,
            learning_rate: config.learning_rate,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect(),
            best_val_loss: f64::INFINITY,
            lr_plateau: 0,
            stall: 0,
        }
    }

    pub fn best_val_loss(&self) -> f64 {
        self.best_val_loss
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn below_floor(&self) -> bool {
        self.learning_rate < self.config.lr_floor
    }

    /// Feeds one epoch's validation loss into the schedule.
    pub fn observe_validation(&mut self, loss: f64) -> ScheduleEvent {
        if loss < self.best_val_loss - self.config.plateau_epsilon {
            self.best_val_loss = loss;
            self.lr_plateau = 0;
            self.stall = 0;
            return ScheduleEvent::Improved;
        }
        self.best_val_loss = self.best_val_loss.min(loss);
        self.lr_plateau += 1;
        self.stall += 1;
        if self.stall >= self.config.stop_patience {
            return ScheduleEvent::Stop(StopReason::Plateau);
        }
        if self.lr_plateau >= self.config.lr_patience {
            self.learning_rate /= self.config.lr_divisor;
            self.lr_plateau = 0;
            if self.below_floor() {
                return ScheduleEvent::Stop(StopReason::LrFloor);
            }
            return ScheduleEvent::LrDropped;
        }
        ScheduleEvent::Plateau
    }
}

/// `v ← μ v − lr (g + λ θ)`, `θ ← θ + v`, for every parameter.
///
/// Nothing is modified when any gradient is non-finite.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if grads.tensors.len() != params.tensors().len() || state.velocity.len() != params.tensors().len() {
        return Err(Error::GeometryMismatch(
            "gradient/parameter tensor count differs".into(),
        ));
    }
    for (t, g) in params.tensors().iter().zip(&grads.tensors) {
        if g.len() != t.data.len() {
            return Err(Error::GeometryMismatch(format!(
                "gradient for {} has wrong length",
                t.name
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: t.name.clone() });
        }
    }
    let (lr, mu, wd) = (state.learning_rate, state.config.momentum, state.config.weight_decay);
    for ((t, g), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.velocity)
    {
        for ((theta, &grad), vel) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
            *vel = mu * *vel - lr * (grad + wd * *theta);
            *theta += *vel;
        }
    }
    params.bump_version();
    Ok(())
}
