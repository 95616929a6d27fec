use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    WarmupCosine,
    Constant,
    Cosine,
}

/// Learning-rate schedule over the steps of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub lr_max: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            lr_max: lr,
            lr_min: lr,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn warmup_cosine(lr_max: f64, lr_min: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::WarmupCosine,
            lr_max,
            lr_min,
            warmup_steps,
            total_steps,
        }
    }

    pub fn cosine(lr_max: f64, lr_min: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            lr_max,
            lr_min,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            bail!(
                Config,
                "need 0 <= lr_min <= lr_max, got {} / {}",
                self.lr_min,
                self.lr_max
            );
        }
        if self.warmup_steps > self.total_steps {
            bail!(
                Config,
                "warmup_steps {} exceed total_steps {}",
                self.warmup_steps,
                self.total_steps
            );
        }
        Ok(())
    }

    /// Learning rate at `step` in `0..=total_steps`: linear warmup from 0,
    /// then `lr_min + (lr_max - lr_min) * (1 + cos(pi * progress)) / 2`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            bail!(
                Argument,
                "step {step} beyond schedule of {} steps",
                self.total_steps
            );
        }
        let warmup = match self.kind {
            ScheduleKind::WarmupCosine => self.warmup_steps,
            _ => 0,
        };
        Ok(match self.kind {
            ScheduleKind::Constant => self.lr_max,
            _ if step < warmup => self.lr_max * step as f64 / warmup as f64,
            _ => {
                let span = self.total_steps - warmup;
                let progress = if span == 0 {
                    1.0
                } else {
                    (step - warmup) as f64 / span as f64
                };
                self.lr_min
                    + 0.5
                        * (self.lr_max - self.lr_min)
                        * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        })
    }
}

/// Free-function form of [`LrSchedule::lr_at`].
pub fn lr_at(step: u64, schedule: &LrSchedule) -> Result<f64> {
    schedule.lr_at(step)
}
