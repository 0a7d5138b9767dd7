use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    /// Linear warmup to `peak_lr`, then polynomial decay to zero.
    PolyWarmup {
        peak_lr: f64,
        total_updates: u64,
        warmup_updates: u64,
        #[serde(default = "default_power")]
        power: f64,
    },
    /// Linear warmup, hold, linear decay to zero. Fractions sum to one.
    TriStage {
        peak_lr: f64,
        total_updates: u64,
        #[serde(default = "default_stages")]
        stages: [f64; 3],
    },
}

fn default_power() -> f64 {
    1.0
}

fn default_stages() -> [f64; 3] {
    [0.1, 0.4, 0.5]
}

impl ScheduleSpec {
    pub fn poly(peak_lr: f64, warmup_updates: u64, total_updates: u64) -> Self {
        ScheduleSpec::PolyWarmup {
            peak_lr,
            total_updates,
            warmup_updates,
            power: 1.0,
        }
    }

    pub fn tri_stage(peak_lr: f64, total_updates: u64) -> Self {
        ScheduleSpec::TriStage {
            peak_lr,
            total_updates,
            stages: default_stages(),
        }
    }

    /// Schedule value at a fractional step, without range checks.
    pub fn at(&self, step: f64) -> f64 {
        rate(self, step)
    }

    pub fn total_updates(&self) -> u64 {
        match self {
            ScheduleSpec::PolyWarmup { total_updates, .. }
            | ScheduleSpec::TriStage { total_updates, .. } => *total_updates,
        }
    }

    pub fn peak_lr(&self) -> f64 {
        match self {
            ScheduleSpec::PolyWarmup { peak_lr, .. } | ScheduleSpec::TriStage { peak_lr, .. } => {
                *peak_lr
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr() > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        match self {
            ScheduleSpec::PolyWarmup {
                total_updates,
                warmup_updates,
                power,
                ..
            } => {
                if warmup_updates >= total_updates {
                    return Err(Error::Config(format!(
                        "warmup_updates {warmup_updates} must be below total_updates {total_updates}"
                    )));
                }
                if !(*power > 0.0) {
                    return Err(Error::Config("decay power must be positive".into()));
                }
            }
            ScheduleSpec::TriStage {
                total_updates,
                stages,
                ..
            } => {
                if *total_updates == 0 {
                    return Err(Error::Config("total_updates must be positive".into()));
                }
                if stages.iter().any(|&s| s < 0.0) || (stages.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return Err(Error::Config(format!(
                        "tri-stage fractions {stages:?} must be nonnegative and sum to 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based update index).
pub fn lr_at(schedule: &ScheduleSpec, step: u64) -> Result<f64> {
    schedule.validate()?;
    let total = schedule.total_updates();
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    Ok(rate(schedule, step as f64))
}

/// Closed-form schedule value at a real-valued step.
fn rate(schedule: &ScheduleSpec, s: f64) -> f64 {
    match *schedule {
        ScheduleSpec::PolyWarmup {
            peak_lr,
            total_updates,
            warmup_updates,
            power,
        } => {
            let w = warmup_updates as f64;
            if s < w {
                peak_lr * s / w
            } else {
                let frac = (s - w) / (total_updates as f64 - w);
                peak_lr * (1.0 - frac).max(0.0).powf(power)
            }
        }
        ScheduleSpec::TriStage {
            peak_lr,
            total_updates,
            stages,
        } => {
            let total = total_updates as f64;
            let warm = stages[0] * total;
            let hold_end = (stages[0] + stages[1]) * total;
            let decay = stages[2] * total;
            if s < warm {
                peak_lr * s / warm
            } else if s < hold_end || decay == 0.0 {
                peak_lr
            } else {
                peak_lr * ((total - s) / decay).clamp(0.0, 1.0)
            }
        }
    }
}
