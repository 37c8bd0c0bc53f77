use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SgdConfig;

/// Which student training objective to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Adversarial feature-map distillation with a shared classifier.
    #[default]
    Kdfm,
    /// Softened-output distillation against ground-truth and teacher logits.
    ClassicKd,
    /// Mean squared error against the teacher's logits.
    LogitsMimic,
    /// Plain cross-entropy on labels, no teacher.
    Baseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Kdfm => "kdfm",
            Method::ClassicKd => "classic_kd",
            Method::LogitsMimic => "logits_mimic",
            Method::Baseline => "baseline",
        }
    }

    pub fn uses_teacher(self) -> bool {
        self != Method::Baseline
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Softmax temperature for soft targets.
    pub t: f64,
    /// Weight of the hard-target term in `L_KD`.
    pub lambda: f64,
    /// Weight of `L_KD` in the generator loss.
    pub alpha: f64,
    pub method: Method,
    /// KDFM only. When false the discriminator is dropped and the generator
    /// minimizes `L_KD` alone.
    pub adversarial: bool,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub opt_g: SgdConfig,
    pub opt_d: SgdConfig,
    pub opt_c: SgdConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            t: 10.0,
            lambda: 0.1,
            alpha: 10.0,
            method: Method::Kdfm,
            adversarial: true,
            d_steps: 1,
            opt_g: SgdConfig::default(),
            opt_d: SgdConfig::default(),
            opt_c: SgdConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::config(format!("t must be positive, got {}", self.t)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.d_steps == 0 {
            return Err(Error::config("d_steps must be at least 1"));
        }
        for (name, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d), ("opt_c", &self.opt_c)] {
            opt.validate().map_err(|e| Error::config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Whether a discriminator takes part in training.
    pub fn uses_discriminator(&self) -> bool {
        self.method == Method::Kdfm && self.adversarial
    }
}
