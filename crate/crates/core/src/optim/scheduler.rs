//! Steepness schedules for the soft-quantization parameter: a rising
//! cosine (2 -> 20), a constant, or a rising power curve.

use super::OptimError;

/// Floor applied so the steepness stays strictly positive at step 0 of the
/// power family.
const BETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSchedule {
    /// `20 - 9 (1 + cos(s pi / S))`: starts at 2, ends at 20.
    AdaroundCosine,
    /// Constant `c`.
    Const(f64),
    /// `20 (s/S)^c`, floored to stay positive.
    Power(f64),
}

impl BetaSchedule {
    pub fn parse(s: &str) -> Result<Self, OptimError> {
        if s == "adaround" {
            return Ok(BetaSchedule::AdaroundCosine);
        }
        if let Some(c) = s.strip_prefix("const:") {
            let c: f64 = c
                .parse()
                .map_err(|_| OptimError::Scheduler(s.to_string()))?;
            if !(c > 0.0 && c.is_finite()) {
                return Err(OptimError::Scheduler(s.to_string()));
            }
            return Ok(BetaSchedule::Const(c));
        }
        if let Some(c) = s.strip_prefix("power:") {
            let c: f64 = c
                .parse()
                .map_err(|_| OptimError::Scheduler(s.to_string()))?;
            if !(c > 0.0 && c.is_finite()) {
                return Err(OptimError::Scheduler(s.to_string()));
            }
            return Ok(BetaSchedule::Power(c));
        }
        Err(OptimError::Scheduler(s.to_string()))
    }
}

impl std::fmt::Display for BetaSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BetaSchedule::AdaroundCosine => write!(f, "adaround"),
            BetaSchedule::Const(c) => write!(f, "const:{c}"),
            BetaSchedule::Power(c) => write!(f, "power:{c}"),
        }
    }
}

/// Steepness schedule over a fixed number of optimization steps.
#[derive(Debug, Clone, Copy)]
pub struct BetaScheduler {
    pub schedule: BetaSchedule,
    pub total_steps: usize,
}

impl BetaScheduler {
    pub fn new(schedule: BetaSchedule, total_steps: usize) -> Result<Self, OptimError> {
        if total_steps == 0 {
            return Err(OptimError::Scheduler("total steps must be >= 1".into()));
        }
        Ok(BetaScheduler {
            schedule,
            total_steps,
        })
    }

    /// Steepness at step `s` in `[0, S]`; always strictly positive.
    pub fn beta_at(&self, step: usize) -> f64 {
        let s = step as f64;
        let total = self.total_steps as f64;
        let beta = match self.schedule {
            BetaSchedule::AdaroundCosine => 20.0 - 9.0 * (1.0 + (s / total * std::f64::consts::PI).cos()),
            BetaSchedule::Const(c) => c,
            BetaSchedule::Power(c) => 20.0 * (s / total).powf(c),
        };
        beta.max(BETA_FLOOR)
    }
}
