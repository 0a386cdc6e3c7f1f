//! SGD with momentum and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::network::{Gradients, ParamRole, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Linear warmup length in epochs.
    #[serde(default)]
    pub warmup_epochs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Sgd
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
            warmup_epochs: 0.0,
        }
    }

    /// Learning rate at `iteration` (0-based) of `total` iterations, with
    /// `per_epoch` iterations per epoch.
    pub fn lr_at(&self, iteration: u64, total: u64, per_epoch: u64) -> f64 {
        let warmup = (self.warmup_epochs * per_epoch as f64).round() as u64;
        if iteration < warmup {
            return self.learning_rate * (iteration + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(warmup).max(1) as f64;
                let t = (iteration - warmup) as f64 / span;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Momentum buffers, one per trainable slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(spec: &OptimizerSpec) -> Self {
        Sgd {
            momentum: spec.momentum,
            nesterov: spec.nesterov,
            weight_decay: spec.weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. Weight decay applies to weight tensors only.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        let lr = T::from_f64_lossy(lr);
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let nesterov = self.nesterov;
        let velocity = &mut self.velocity;
        params.for_each_trainable_mut(grads, |slot, role, w, g| {
            if velocity.len() <= slot {
                velocity.resize_with(slot + 1, Vec::new);
            }
            let v = &mut velocity[slot];
            if v.len() != w.len() {
                *v = vec![T::zero(); w.len()];
            }
            for i in 0..w.len() {
                let mut d = g[i];
                if role == ParamRole::Weight {
                    d = d + wd * w[i];
                }
                v[i] = mu * v[i] + d;
                let upd = if nesterov { d + mu * v[i] } else { v[i] };
                w[i] = w[i] - lr * upd;
            }
        });
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<T>>) {
        self.velocity = velocity;
    }
}
