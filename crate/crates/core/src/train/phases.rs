use serde::{Deserialize, Serialize};

use super::schedule::{LrSchedule, ScheduleKind};
use crate::error::{bail, Result};

/// Batch size that applies once `tokens` tokens of the phase have been seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampPoint {
    pub tokens: u64,
    pub batch: usize,
}

/// Learning-rate shape of one phase. `total_steps` defaults to the number
/// of steps the phase's token budget and batch ramp imply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub kind: ScheduleKind,
    pub lr_max: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub total_steps: Option<u64>,
}

impl PhaseSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            lr_max: lr,
            lr_min: lr,
            warmup_steps: 0,
            total_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub token_budget: u64,
    pub seq_len: usize,
    pub rope_base: f64,
    /// Before the first threshold the first entry's batch size applies.
    pub batch_ramp: Vec<RampPoint>,
    pub schedule: PhaseSchedule,
}

impl Phase {
    pub fn batch_at(&self, phase_tokens: u64) -> usize {
        self.batch_ramp
            .iter()
            .rev()
            .find(|r| r.tokens <= phase_tokens)
            .unwrap_or(&self.batch_ramp[0])
            .batch
    }

    /// Steps needed to consume the token budget, stepping through the ramp.
    pub fn planned_steps(&self) -> u64 {
        let mut tokens = 0u64;
        let mut steps = 0u64;
        while tokens < self.token_budget {
            let per_step = self.batch_at(tokens) as u64 * self.seq_len as u64;
            let next = self
                .batch_ramp
                .iter()
                .map(|r| r.tokens)
                .find(|&t| t > tokens)
                .unwrap_or(u64::MAX)
                .min(self.token_budget);
            let n = (next - tokens).div_ceil(per_step);
            steps += n;
            tokens += n * per_step;
        }
        steps
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        let s = self.schedule;
        LrSchedule {
            kind: s.kind,
            lr_max: s.lr_max,
            lr_min: s.lr_min,
            warmup_steps: s.warmup_steps,
            total_steps: s.total_steps.unwrap_or_else(|| self.planned_steps()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = &self.name;
        if self.token_budget == 0 {
            bail!(Config, "phase `{name}`: token_budget must be positive");
        }
        if self.seq_len == 0 {
            bail!(Config, "phase `{name}`: seq_len must be positive");
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            bail!(Config, "phase `{name}`: rope_base must be positive");
        }
        if self.batch_ramp.is_empty() {
            bail!(Config, "phase `{name}`: batch_ramp is empty");
        }
        if self.batch_ramp.iter().any(|r| r.batch == 0) {
            bail!(Config, "phase `{name}`: batch sizes must be positive");
        }
        if self
            .batch_ramp
            .windows(2)
            .any(|w| w[0].tokens >= w[1].tokens)
        {
            bail!(
                Config,
                "phase `{name}`: batch_ramp thresholds must increase"
            );
        }
        self.lr_schedule()
            .validate()
            .map_err(|e| crate::Error::Config(format!("phase `{name}`: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

const T: u64 = 1_000_000_000_000;

impl PhasePlan {
    /// Full-scale pre-training and long-context plan: 4K general, 4K
    /// reasoning, 8K annealing, then 32K and 128K extension.
    pub fn reference() -> Self {
        let ramp = |points: &[(u64, usize)]| {
            points
                .iter()
                .map(|&(tokens, batch)| RampPoint { tokens, batch })
                .collect()
        };
        Self {
            phases: vec![
                Phase {
                    name: "general".into(),
                    token_budget: 7_400_000_000_000,
                    seq_len: 4096,
                    rope_base: 1e4,
                    batch_ramp: ramp(&[
                        (0, 1024),
                        (1_200_000_000_000, 1536),
                        (1_900_000_000_000, 2048),
                    ]),
                    schedule: PhaseSchedule {
                        kind: ScheduleKind::WarmupCosine,
                        lr_max: 1e-4,
                        lr_min: 1e-5,
                        warmup_steps: 4000,
                        total_steps: None,
                    },
                },
                Phase {
                    name: "reasoning".into(),
                    token_budget: 4_600_000_000_000,
                    seq_len: 4096,
                    rope_base: 1e4,
                    batch_ramp: ramp(&[(0, 2048)]),
                    schedule: PhaseSchedule::constant(1e-5),
                },
                Phase {
                    name: "annealing".into(),
                    token_budget: 800_000_000_000,
                    seq_len: 8192,
                    rope_base: 1e5,
                    batch_ramp: ramp(&[(0, 1536)]),
                    schedule: PhaseSchedule {
                        kind: ScheduleKind::Cosine,
                        lr_max: 1e-5,
                        lr_min: 7.5e-6,
                        warmup_steps: 0,
                        total_steps: None,
                    },
                },
                Phase {
                    name: "long-32k".into(),
                    token_budget: T / 5,
                    seq_len: 32768,
                    rope_base: 1.6e6,
                    batch_ramp: ramp(&[(0, 384)]),
                    schedule: PhaseSchedule::constant(7.5e-6),
                },
                Phase {
                    name: "long-128k".into(),
                    token_budget: T / 5,
                    seq_len: 131072,
                    rope_base: 2.56e7,
                    batch_ramp: ramp(&[(0, 96)]),
                    schedule: PhaseSchedule::constant(7.5e-6),
                },
            ],
        }
    }

    /// Single warmup+cosine phase of `steps * batch * seq_len` tokens.
    pub fn single(
        name: &str,
        steps: u64,
        batch: usize,
        seq_len: usize,
        rope_base: f64,
        lr: f64,
        warmup: u64,
    ) -> Self {
        Self {
            phases: vec![Phase {
                name: name.into(),
                token_budget: steps * batch as u64 * seq_len as u64,
                seq_len,
                rope_base,
                batch_ramp: vec![RampPoint { tokens: 0, batch }],
                schedule: PhaseSchedule {
                    kind: ScheduleKind::WarmupCosine,
                    lr_max: lr,
                    lr_min: lr / 10.0,
                    warmup_steps: warmup,
                    total_steps: None,
                },
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            bail!(Config, "phase plan has no phases");
        }
        self.phases.iter().try_for_each(Phase::validate)
    }

    pub fn total_tokens(&self) -> u64 {
        self.phases.iter().map(|p| p.token_budget).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_plan_shape() {
        let plan = PhasePlan::reference();
        plan.validate().unwrap();
        let bases: Vec<f64> = plan.phases.iter().map(|p| p.rope_base).collect();
        assert_eq!(bases, vec![1e4, 1e4, 1e5, 1.6e6, 2.56e7]);
        assert_eq!(
            plan.phases[0].token_budget + plan.phases[1].token_budget,
            12 * T
        );
        let general = &plan.phases[0];
        assert_eq!(general.batch_at(0), 1024);
        assert_eq!(general.batch_at(1_200_000_000_000 - 1), 1024);
        assert_eq!(general.batch_at(1_200_000_000_000), 1536);
        assert_eq!(general.batch_at(1_900_000_000_000), 2048);
        let lr = general.lr_schedule();
        assert_eq!(lr.lr_at(4000).unwrap(), 1e-4);
        assert!((lr.lr_at(lr.total_steps).unwrap() - 1e-5).abs() < 1e-20);
        assert_eq!(plan.phases[4].batch_at(0), 96);
    }

    #[test]
    fn planned_steps_follow_ramp() {
        let phase = Phase {
            name: "p".into(),
            token_budget: 400,
            seq_len: 10,
            rope_base: 1e4,
            batch_ramp: vec![
                RampPoint {
                    tokens: 0,
                    batch: 1,
                },
                RampPoint {
                    tokens: 100,
                    batch: 2,
                },
                RampPoint {
                    tokens: 200,
                    batch: 4,
                },
            ],
            schedule: PhaseSchedule::constant(1e-3),
        };
        // 10 steps of 10, 5 of 20, 5 of 40
        assert_eq!(phase.planned_steps(), 20);
    }

    #[test]
    fn validation_rejects_bad_ramps() {
        let mut plan = PhasePlan::single("x", 10, 2, 8, 1e4, 1e-3, 2);
        plan.validate().unwrap();
        plan.phases[0].batch_ramp.push(RampPoint {
            tokens: 0,
            batch: 4,
        });
        assert!(plan.validate().is_err());
        let mut plan = PhasePlan::single("x", 10, 2, 8, 1e4, 1e-3, 2);
        plan.phases[0].token_budget = 0;
        assert!(plan.validate().is_err());
    }
}
