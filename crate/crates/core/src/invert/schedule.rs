use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleTarget {
    /// Index into the spec's regularizer list.
    Regularizer(usize),
    StepSize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    /// Multiply by `rate` every iteration.
    ExponentialDecay {
        rate: f64,
    },
}

/// Per-iteration value of one regularizer weight or of the step size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub target: ScheduleTarget,
    #[serde(flatten)]
    pub kind: ScheduleKind,
    #[serde(default)]
    pub floor: f64,
}

impl Schedule {
    pub fn exponential(target: ScheduleTarget, rate: f64, floor: f64) -> Self {
        Self { target, kind: ScheduleKind::ExponentialDecay { rate }, floor }
    }

    /// `max(base · rate^t, floor)`; a constant schedule returns `max(base, floor)`.
    pub fn value(&self, base: f64, t: usize) -> f64 {
        let v = match self.kind {
            ScheduleKind::Constant => base,
            ScheduleKind::ExponentialDecay { rate } => base * rate.powf(t as f64),
        };
        v.max(self.floor)
    }

    pub fn validate(&self, n_regularizers: usize) -> Result<()> {
        if let ScheduleTarget::Regularizer(i) = self.target {
            if i >= n_regularizers {
                return Err(Error::Invalid(format!("schedule targets regularizer {i}, spec has {n_regularizers}")));
            }
        }
        if !(self.floor >= 0.0) || !self.floor.is_finite() {
            return Err(Error::Invalid(format!("schedule floor must be ≥ 0, got {}", self.floor)));
        }
        if let ScheduleKind::ExponentialDecay { rate } = self.kind {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::Invalid(format!("decay rate must be in (0, 1], got {rate}")));
            }
        }
        Ok(())
    }
}

/// Regularizer weights at iteration `t` after applying every schedule.
pub fn scheduled_weights(base: &[f64], schedules: &[Schedule], t: usize) -> Vec<f64> {
    let mut w = base.to_vec();
    for s in schedules {
        if let ScheduleTarget::Regularizer(i) = s.target {
            w[i] = s.value(base[i], t);
        }
    }
    w
}

/// Step size at iteration `t`; the last step-size schedule wins.
pub fn scheduled_step(base: f64, schedules: &[Schedule], t: usize) -> f64 {
    schedules.iter().rfind(|s| s.target == ScheduleTarget::StepSize).map_or(base, |s| s.value(base, t))
}
