//! Linear warmup followed by cosine decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub total_steps: u64,
    /// Final learning rate as a fraction of `peak_lr`.
    pub final_lr_fraction: f64,
}

impl ScheduleConfig {
    /// Builds a schedule whose warmup is a fraction of the run, clamped so
    /// that `0 < warmup_steps < total_steps`.
    pub fn from_fraction(total_steps: u64, warmup_fraction: f64, peak_lr: f64, final_lr_fraction: f64) -> Result<Self> {
        if total_steps < 2 {
            return Err(ModelError::Argument(format!(
                "a schedule needs at least 2 steps, got {}",
                total_steps
            )));
        }
        let warmup = ((total_steps as f64) * warmup_fraction).round() as u64;
        let schedule = Self {
            warmup_steps: warmup.clamp(1, total_steps - 1),
            peak_lr,
            total_steps,
            final_lr_fraction,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps > 0 && self.warmup_steps < self.total_steps) {
            return Err(ModelError::Config(format!(
                "schedule needs 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(ModelError::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(ModelError::Config(format!(
                "final_lr_fraction must lie in [0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`, for `0 <= step <= total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(ModelError::Argument(format!(
                "step {} is beyond the schedule's {} steps",
                step, self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let floor = self.final_lr_fraction * self.peak_lr;
        Ok(floor + (self.peak_lr - floor) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}
