use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inner-maximization settings and the weight of the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub alpha: f64,
    /// Per-column L2 bound on the perturbation, in embedding units.
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub ascent_lr: f64,
    /// Half-width of the uniform initialization.
    pub init_scale: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 0.5,
            ascent_steps: 3,
            ascent_lr: 0.1,
            init_scale: 0.05,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if self.ascent_steps == 0 {
            return bad("ascent_steps must be >= 1 (use vanilla mode for plain training)");
        }
        if !(self.ascent_lr > 0.0) {
            return bad("ascent_lr must be > 0");
        }
        if !(self.init_scale >= 0.0 && self.init_scale <= self.epsilon) {
            return bad("init_scale must lie in [0, epsilon]");
        }
        Ok(())
    }
}

/// Adam constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer needs lr > 0, betas in [0,1), eps > 0".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Clean cross-entropy only.
    Vanilla,
    /// Clean loss plus the perturbed cross-entropy and consistency terms.
    Adversarial,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::Adversarial => "adversarial",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(TrainMode::Vanilla),
            "adversarial" => Ok(TrainMode::Adversarial),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected vanilla or adversarial)"
            ))),
        }
    }
}
