//! SGD with Nesterov momentum, L2 weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Gradients, Model};
use crate::tensor::Scalar;

/// Step schedule: `base / factor^k` after the `k`-th drop epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub drops: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base: 1e-3, drops: vec![20, 40], factor: 10.0 }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let passed = self.drops.iter().filter(|&&d| epoch >= d).count();
        self.base / self.factor.powi(passed as i32)
    }
}

/// Learning rate of the default 60-epoch schedule (1e-3, divided by 10 at
/// epochs 20 and 40).
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter block; present iff `momentum > 0`.
    velocity: Option<Vec<Vec<T>>>,
    pub epoch: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Model<T>, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {learning_rate}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!("bad weight decay {weight_decay}")));
        }
        let velocity = (momentum > 0.0).then(|| model.params().iter().map(|p| vec![T::ZERO; p.values.len()]).collect());
        Ok(OptimizerState { learning_rate, momentum, weight_decay, velocity, epoch: 0 })
    }

    pub fn velocity(&self) -> Option<&[Vec<T>]> {
        self.velocity.as_deref()
    }

    pub fn set_velocity(&mut self, velocity: Option<Vec<Vec<T>>>) -> Result<()> {
        if velocity.is_some() != (self.momentum > 0.0) {
            return Err(Error::State("velocity buffers must exist exactly when momentum > 0".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Resets the velocity to match a model whose parameter shapes changed.
    pub fn reset_velocity(&mut self, model: &Model<T>) {
        if self.momentum > 0.0 {
            self.velocity = Some(model.params().iter().map(|p| vec![T::ZERO; p.values.len()]).collect());
        }
    }
}

/// One Nesterov step (`v ← μv − η(g + λw)`, `w ← w + μv − η(g + λw)`), with
/// decay on weights only. Nothing is modified when any gradient is
/// non-finite or mis-shaped.
pub fn sgd_nesterov_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let mut params = model.params_mut();
    if grads.blocks.len() != params.len() {
        return Err(Error::State(format!(
            "{} gradient blocks for {} parameter blocks",
            grads.blocks.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(&grads.blocks) {
        if g.len() != p.values.len() {
            return Err(Error::State(format!(
                "gradient for {} has {} values, parameter has {}",
                p.name,
                g.len(),
                p.values.len()
            )));
        }
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(p.name.clone(), format!("non-finite gradient at index {bad}")));
        }
    }
    if let Some(v) = &state.velocity {
        if v.len() != params.len() || v.iter().zip(&params).any(|(v, p)| v.len() != p.values.len()) {
            return Err(Error::State("velocity buffers do not match the model".into()));
        }
    }
    let lr = T::from_f64(state.learning_rate);
    let mu = T::from_f64(state.momentum);
    let wd = T::from_f64(state.weight_decay);
    for (i, (p, g)) in params.iter_mut().zip(&grads.blocks).enumerate() {
        let decay = p.decay && state.weight_decay > 0.0;
        match state.velocity.as_mut() {
            Some(vel) => {
                for ((w, &g), v) in p.values.iter_mut().zip(g).zip(vel[i].iter_mut()) {
                    let step = lr * if decay { g + wd * *w } else { g };
                    *v = mu * *v - step;
                    *w += mu * *v - step;
                }
            }
            None => {
                for (w, &g) in p.values.iter_mut().zip(g) {
                    let step = lr * if decay { g + wd * *w } else { g };
                    *w -= step;
                }
            }
        }
    }
    Ok(())
}
