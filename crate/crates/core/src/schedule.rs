//! Per-step value schedules for learning rate, weight decay and the teacher
//! momentum coefficient.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    Constant,
    /// Linear ramp `0 -> base` over the warmup, then half-cosine `base -> final`.
    WarmupCosine,
    /// Half-cosine `base -> final` over the whole span.
    CosineRange,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_value: f64,
    pub final_value: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn constant(value: f64, total_steps: usize) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            base_value: value,
            final_value: value,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn warmup_cosine(base: f64, final_value: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        let s = Schedule {
            kind: ScheduleKind::WarmupCosine,
            base_value: base,
            final_value,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn cosine_range(base: f64, final_value: f64, total_steps: usize) -> Result<Self> {
        let s = Schedule {
            kind: ScheduleKind::CosineRange,
            base_value: base,
            final_value,
            warmup_steps: 0,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Parameter(format!(
                "warmup of {} steps exceeds the {} total steps",
                self.warmup_steps, self.total_steps
            )));
        }
        if !self.base_value.is_finite() || !self.final_value.is_finite() {
            return Err(Error::Parameter("schedule endpoints must be finite".into()));
        }
        Ok(())
    }

    /// Value at optimizer step `step`, for `0 <= step <= total_steps`.
    pub fn at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Parameter(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let half_cosine = |progress: f64| {
            self.final_value + 0.5 * (self.base_value - self.final_value) * (1.0 + (PI * progress).cos())
        };
        Ok(match self.kind {
            ScheduleKind::Constant => self.base_value,
            ScheduleKind::CosineRange => {
                if self.total_steps == 0 {
                    self.base_value
                } else {
                    half_cosine(step as f64 / self.total_steps as f64)
                }
            }
            ScheduleKind::WarmupCosine => {
                if step < self.warmup_steps {
                    self.base_value * step as f64 / self.warmup_steps as f64
                } else {
                    let span = self.total_steps - self.warmup_steps;
                    if span == 0 {
                        self.base_value
                    } else {
                        half_cosine((step - self.warmup_steps) as f64 / span as f64)
                    }
                }
            }
        })
    }
}

/// Free-function form of [`Schedule::at`].
pub fn schedule_at(s: &Schedule, step: usize) -> Result<f64> {
    s.at(step)
}

/// Linear scaling rule for the pretraining learning rate:
/// `base * batch_size / 256`.
pub fn scaled_lr(base: f64, batch_size: usize) -> f64 {
    base * batch_size as f64 / 256.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn warmup_endpoints() {
        let s = Schedule::warmup_cosine(1e-3, 1e-6, 10, 100).unwrap();
        assert_eq!(s.at(0).unwrap(), 0.0);
        assert_eq!(s.at(10).unwrap(), 1e-3);
        assert!((s.at(100).unwrap() - 1e-6).abs() < 1e-15);
        assert!((s.at(5).unwrap() - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn cosine_range_midpoint_is_mean() {
        let s = Schedule::cosine_range(0.04, 0.4, 100).unwrap();
        assert!((s.at(50).unwrap() - 0.22).abs() < 1e-12);
        assert!((s.at(0).unwrap() - 0.04).abs() < 1e-15);
        assert!((s.at(100).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn cosine_midpoint_of_post_warmup_span() {
        let s = Schedule::warmup_cosine(0.04, 0.4, 20, 120).unwrap();
        assert!((s.at(70).unwrap() - 0.22).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_step_rejected() {
        let s = Schedule::cosine_range(0.96, 1.0, 10).unwrap();
        assert!(matches!(s.at(11), Err(Error::Parameter(_))));
        assert!(Schedule::warmup_cosine(1.0, 0.0, 11, 10).is_err());
    }

    #[test]
    fn scaling_rule() {
        assert!((scaled_lr(1e-4, 512) - 2e-4).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn values_stay_in_range(base in 0.0f64..1.0, fin in 0.0f64..1.0,
                                warm in 0usize..50, extra in 0usize..200, frac in 0.0f64..=1.0) {
            let total = warm + extra;
            let s = Schedule::warmup_cosine(base, fin, warm, total).unwrap();
            let step = (frac * total as f64).round() as usize;
            let v = s.at(step).unwrap();
            prop_assert!(v.is_finite());
            if step >= warm {
                prop_assert!(v >= base.min(fin) - 1e-12 && v <= base.max(fin) + 1e-12);
            } else {
                prop_assert!(v >= 0.0 && v <= base + 1e-12);
            }
        }
    }
}
