use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The first `warmup_steps` updates ramp the rate linearly up to `lr`.
    pub warmup_steps: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.lr) || !ok(self.weight_decay) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "need lr ≥ 0, weight_decay ≥ 0 and momentum in [0, 1), got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `½·(1 + cos(π·epoch/epochs))`, stepped once per epoch.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, epoch: u64, epochs: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if epochs == 0 => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()),
        }
    }
}

/// Velocity buffers for one model, in the model's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S: Scalar = f32> {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor<S>>,
    pub steps: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new<'a>(config: SgdConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        OptimizerState {
            config,
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            steps: 0,
        }
    }

    /// Sets the learning rate to `base.lr · factor`, keeping the velocity.
    pub fn scale_lr(&mut self, base: &SgdConfig, factor: f64) {
        self.config.lr = base.lr * factor;
    }

    /// Rate for the next update, including warmup.
    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if self.steps < w {
            self.config.lr * (self.steps + 1) as f64 / w as f64
        } else {
            self.config.lr
        }
    }

    /// `v ← μ·v + g + wd·p; p ← p − lr·v`, then clears each gradient.
    ///
    /// Fails before touching anything if a parameter has no gradient or the
    /// parameter list does not line up with the buffers.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<S>>) -> Result<()> {
        let mut params: Vec<&mut Tensor<S>> = params.into_iter().collect();
        if params.len() != self.velocity.len() {
            return Err(Error::usage(format!(
                "optimizer holds {} buffers but got {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        for (i, (p, v)) in params.iter().zip(&self.velocity).enumerate() {
            if p.shape() != v.shape() {
                return Err(Error::Dimension {
                    op: "optimizer_step",
                    lhs: v.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            if p.grad().is_none() {
                return Err(Error::usage(format!("parameter {i} has no gradient")));
            }
        }
        let lr = S::from_f64(self.current_lr());
        let mu = S::from_f64(self.config.momentum);
        let wd = S::from_f64(self.config.weight_decay);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for ((w, vel), gv) in data.iter_mut().zip(v.data_mut()).zip(g) {
                *vel = mu * *vel + gv + wd * *w;
                *w -= lr * *vel;
            }
            p.zero_grad();
        }
        self.steps += 1;
        Ok(())
    }
}
