//! Linear ramp from a starting capacity to a final capacity, in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("invalid capacity schedule: {0}")]
pub struct ScheduleError(String);

/// Target-capacity schedule: linear from `c_start` to `c_end` over
/// `ramp_iters` iterations, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacitySchedule {
    pub c_start: f64,
    pub c_end: f64,
    pub ramp_iters: u64,
}

impl CapacitySchedule {
    pub fn new(c_start: f64, c_end: f64, ramp_iters: u64) -> Result<Self, ScheduleError> {
        let s = CapacitySchedule {
            c_start,
            c_end,
            ramp_iters,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !self.c_start.is_finite() || self.c_start < 0.0 {
            return Err(ScheduleError(format!(
                "c_start {} must be a non-negative real",
                self.c_start
            )));
        }
        if !self.c_end.is_finite() || self.c_end < self.c_start {
            return Err(ScheduleError(format!(
                "c_end {} must be >= c_start {}",
                self.c_end, self.c_start
            )));
        }
        if self.ramp_iters == 0 {
            return Err(ScheduleError("ramp_iters must be positive".into()));
        }
        Ok(())
    }

    /// Capacity target at an iteration:
    /// `c_start + (c_end - c_start) * min(iteration / ramp_iters, 1)`.
    pub fn capacity_at(&self, iteration: u64) -> f64 {
        let frac = (iteration as f64 / self.ramp_iters as f64).min(1.0);
        self.c_start + (self.c_end - self.c_start) * frac
    }
}
