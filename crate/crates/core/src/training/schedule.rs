use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Result, TsdError};

/// Fraction of the run spent ramping up.
const RAMP: f64 = 0.3;
/// Ratio of the peak to the final learning rate.
const FINAL_DIVISOR: f64 = 25.0;

/// One-cycle learning rate: linear ramp `0 → max_lr` over the first 30% of
/// steps, then cosine decay to `max_lr / 25` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(TsdError::Usage(format!(
            "schedule step {step} outside 0..{total_steps}"
        )));
    }
    let peak = RAMP * total_steps as f64;
    let s = step as f64;
    if s <= peak && peak > 0.0 {
        return Ok(max_lr * s / peak);
    }
    let low = max_lr / FINAL_DIVISOR;
    let span = (total_steps - 1) as f64 - peak;
    if span <= 0.0 {
        return Ok(low);
    }
    let progress = ((s - peak) / span).min(1.0);
    Ok(low + (max_lr - low) * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduler {
    #[default]
    Constant,
    OneCycle,
}

impl Scheduler {
    pub fn lr(self, step: usize, total_steps: usize, base: f64) -> Result<f64> {
        match self {
            Scheduler::Constant => Ok(base),
            Scheduler::OneCycle => one_cycle_lr(step, total_steps, base),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheduler::Constant => "constant",
            Scheduler::OneCycle => "one_cycle",
        }
    }
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheduler {
    type Err = TsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" | "none" => Ok(Scheduler::Constant),
            "one_cycle" | "onecycle" => Ok(Scheduler::OneCycle),
            other => Err(TsdError::config(format!(
                "unknown scheduler {other:?} (expected constant or one_cycle)"
            ))),
        }
    }
}
