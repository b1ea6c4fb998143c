use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which index drives the exponential decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdIndex {
    /// `t` is the DDIM timestep, `T` at the first denoising step.
    #[default]
    Timestep,
    /// `t` is replaced by `T - t`, the number of steps already taken.
    StepsTaken,
}

/// Per-loss gates `beta * exp(-t / alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdSchedule {
    pub beta_at: f64,
    pub alpha_at: f64,
    pub beta_dj: f64,
    pub alpha_dj: f64,
    pub beta_bg: f64,
    pub alpha_bg: f64,
    pub index: ThresholdIndex,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            beta_at: 0.6,
            alpha_at: 25.0,
            beta_dj: 0.2,
            alpha_dj: 25.0,
            beta_bg: 0.2,
            alpha_bg: 25.0,
            index: ThresholdIndex::Timestep,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Thresholds {
    pub at: f64,
    pub dj: f64,
    pub bg: f64,
}

impl ThresholdSchedule {
    /// Every gate open: the token loop never runs.
    pub fn disabled() -> Self {
        Self {
            beta_at: f64::INFINITY,
            beta_dj: f64::INFINITY,
            beta_bg: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_at, self.alpha_at, self.beta_dj, self.alpha_dj, self.beta_bg, self.alpha_bg];
        if all.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("threshold betas and alphas must be positive"));
        }
        Ok(())
    }

    /// Thresholds at timestep `t` of a `steps`-step schedule.
    pub fn at(&self, t: usize, steps: usize) -> Thresholds {
        let x = match self.index {
            ThresholdIndex::Timestep => t,
            ThresholdIndex::StepsTaken => steps.saturating_sub(t),
        } as f64;
        Thresholds {
            at: self.beta_at * (-x / self.alpha_at).exp(),
            dj: self.beta_dj * (-x / self.alpha_dj).exp(),
            bg: self.beta_bg * (-x / self.alpha_bg).exp(),
        }
    }
}
