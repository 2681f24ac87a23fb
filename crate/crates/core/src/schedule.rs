//! Epoch-granularity learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    Constant {
        base_lr: f64,
    },
    /// step-LR(i, γ): multiply by `gamma` every `plateau` epochs.
    Step {
        base_lr: f64,
        plateau: usize,
        gamma: f64,
    },
    Multistep {
        base_lr: f64,
        milestones: Vec<usize>,
        gamma: f64,
    },
    /// Slow start, fast decay: a geometric ramp from `start_fraction·peak_lr`
    /// up to `peak_lr` over `warmup_epochs`, then geometric decay by `decay`
    /// per epoch.
    Ssfd {
        peak_lr: f64,
        warmup_epochs: usize,
        start_fraction: f64,
        decay: f64,
        total_epochs: usize,
    },
}

impl ScheduleSpec {
    /// Defaults used for the 10-epoch adversarial fine-tune.
    pub fn ssfd_default() -> Self {
        ScheduleSpec::Ssfd {
            peak_lr: 1e-3,
            warmup_epochs: 3,
            start_fraction: 0.04,
            decay: 0.3,
            total_epochs: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, "must be a finite positive rate"))
            }
        };
        let gamma_ok = |g: f64| {
            if g > 0.0 && g <= 1.0 {
                Ok(())
            } else {
                Err(Error::config("gamma", "must lie in (0, 1]"))
            }
        };
        match self {
            ScheduleSpec::Constant { base_lr } => positive("base_lr", *base_lr),
            ScheduleSpec::Step {
                base_lr,
                plateau,
                gamma,
            } => {
                positive("base_lr", *base_lr)?;
                gamma_ok(*gamma)?;
                if *plateau == 0 {
                    return Err(Error::config("plateau", "must be >= 1"));
                }
                Ok(())
            }
            ScheduleSpec::Multistep {
                base_lr,
                milestones,
                gamma,
            } => {
                positive("base_lr", *base_lr)?;
                gamma_ok(*gamma)?;
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("milestones", "must be strictly increasing"));
                }
                Ok(())
            }
            ScheduleSpec::Ssfd {
                peak_lr,
                warmup_epochs,
                start_fraction,
                decay,
                total_epochs,
            } => {
                positive("peak_lr", *peak_lr)?;
                if !(*start_fraction > 0.0 && *start_fraction < 1.0) {
                    return Err(Error::config("start_fraction", "must lie in (0, 1)"));
                }
                if !(*decay > 0.0 && *decay < 1.0) {
                    return Err(Error::config("decay", "must lie in (0, 1)"));
                }
                if !(*warmup_epochs >= 1 && warmup_epochs < total_epochs) {
                    return Err(Error::config(
                        "warmup_epochs",
                        "must satisfy 1 <= warmup_epochs < total_epochs",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Number of epochs the schedule is designed for, if it has one.
    pub fn horizon(&self) -> Option<usize> {
        match self {
            ScheduleSpec::Ssfd { total_epochs, .. } => Some(*total_epochs),
            _ => None,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self {
            ScheduleSpec::Constant { base_lr } => *base_lr,
            ScheduleSpec::Step {
                base_lr,
                plateau,
                gamma,
            } => base_lr * gamma.powi((epoch / plateau) as i32),
            ScheduleSpec::Multistep {
                base_lr,
                milestones,
                gamma,
            } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                base_lr * gamma.powi(passed as i32)
            }
            ScheduleSpec::Ssfd {
                peak_lr,
                warmup_epochs,
                start_fraction,
                decay,
                ..
            } => {
                if epoch < *warmup_epochs {
                    let progress = epoch as f64 / *warmup_epochs as f64;
                    peak_lr * start_fraction.powf(1.0 - progress)
                } else {
                    peak_lr * decay.powi((epoch - warmup_epochs) as i32)
                }
            }
        }
    }
}
