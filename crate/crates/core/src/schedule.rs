//! Polynomially decaying learning rates `γ(t) = γ₀ (δ + t)^(−η)`.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule {
    pub gamma0: f64,
    pub delta: f64,
    pub eta: f64,
}

impl LearningRateSchedule {
    pub fn new(gamma0: f64, delta: f64, eta: f64) -> Self {
        Self { gamma0, delta, eta }
    }

    /// Rate at time `t ≥ 0`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!(
                "learning rate evaluated at negative time {t}"
            )));
        }
        Ok(self.at(t))
    }

    /// Unchecked evaluation for the integrator's inner loop.
    #[inline]
    pub(crate) fn at(&self, t: f64) -> f64 {
        self.gamma0 * (self.delta + t).powf(-self.eta)
    }

    fn check_positive(&self, which: &str) -> std::result::Result<(), ScheduleViolation> {
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite())
            || !(self.delta > 0.0 && self.delta.is_finite())
        {
            return Err(ScheduleViolation::NonPositive {
                which: which.to_string(),
            });
        }
        Ok(())
    }
}

/// Outer (slow) and inner (fast) schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePair {
    pub outer: LearningRateSchedule,
    pub inner: LearningRateSchedule,
}

/// The clause of the learning-rate assumption that a schedule pair breaks.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleViolation {
    NonPositive { which: String },
    Range { which: String, eta: f64 },
    Ordering { outer_eta: f64, inner_eta: f64 },
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleViolation::NonPositive { which } => write!(
                f,
                "learning-rate assumption violated: {which} schedule needs gamma0 > 0 and delta > 0"
            ),
            ScheduleViolation::Range { which, eta } => write!(
                f,
                "learning-rate assumption violated: {which} exponent eta = {eta} must lie in (1/2, 1)"
            ),
            ScheduleViolation::Ordering {
                outer_eta,
                inner_eta,
            } => write!(
                f,
                "learning-rate assumption violated: outer eta ({outer_eta}) must exceed inner eta ({inner_eta})"
            ),
        }
    }
}

impl SchedulePair {
    pub fn new(outer: LearningRateSchedule, inner: LearningRateSchedule) -> Self {
        Self { outer, inner }
    }

    /// Accepts iff both rates are positive, both exponents lie in the open
    /// interval (1/2, 1), and the outer exponent is strictly larger.
    pub fn validate(&self) -> std::result::Result<(), ScheduleViolation> {
        self.outer.check_positive("outer")?;
        self.inner.check_positive("inner")?;
        for (which, s) in [("outer", &self.outer), ("inner", &self.inner)] {
            if !(s.eta > 0.5 && s.eta < 1.0) {
                return Err(ScheduleViolation::Range {
                    which: which.to_string(),
                    eta: s.eta,
                });
            }
        }
        if !(self.outer.eta > self.inner.eta) {
            return Err(ScheduleViolation::Ordering {
                outer_eta: self.outer.eta,
                inner_eta: self.inner.eta,
            });
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        self.validate().map_err(|v| Error::Config(v.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pair(outer: f64, inner: f64) -> SchedulePair {
        SchedulePair::new(
            LearningRateSchedule::new(1.0, 1.0, outer),
            LearningRateSchedule::new(1.0, 1.0, inner),
        )
    }

    #[test]
    fn eval_examples() {
        let s = LearningRateSchedule::new(1.0, 1.0, 0.9);
        assert_eq!(s.eval(0.0).unwrap(), 1.0);
        // 1000^(-0.9) = 10^(-2.7)
        assert_relative_eq!(
            s.eval(999.0).unwrap(),
            10f64.powf(-2.7),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            s.eval(999.0).unwrap(),
            0.001_995_262_314_968_88,
            max_relative = 1e-12
        );
        let s = LearningRateSchedule::new(2.0, 4.0, 0.5);
        assert_relative_eq!(s.eval(0.0).unwrap(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn negative_time_is_a_domain_error() {
        let s = LearningRateSchedule::new(1.0, 1.0, 0.9);
        assert!(matches!(s.eval(-1e-3), Err(Error::Domain(_))));
    }

    #[test]
    fn validation_clauses() {
        assert!(pair(0.9, 0.6).validate().is_ok());
        assert!(matches!(
            pair(0.6, 0.9).validate(),
            Err(ScheduleViolation::Ordering { .. })
        ));
        assert!(matches!(
            pair(0.9, 0.4).validate(),
            Err(ScheduleViolation::Range { .. })
        ));
        assert!(matches!(
            pair(1.0, 0.6).validate(),
            Err(ScheduleViolation::Range { .. })
        ));
        assert!(matches!(
            pair(0.7, 0.7).validate(),
            Err(ScheduleViolation::Ordering { .. })
        ));
        let msg = pair(0.6, 0.9).check().unwrap_err().to_string();
        assert!(msg.contains("learning-rate assumption"), "{msg}");
    }

    fn trapezoid(s: &LearningRateSchedule, t_end: f64, n: usize) -> f64 {
        let h = t_end / n as f64;
        let mut acc = 0.5 * (s.at(0.0) + s.at(t_end));
        for k in 1..n {
            acc += s.at(k as f64 * h);
        }
        acc * h
    }

    #[test]
    fn cumulative_rate_diverges() {
        let s = LearningRateSchedule::new(1.0, 1.0, 0.9);
        let a = trapezoid(&s, 1e4, 200_000);
        let b = trapezoid(&s, 2e4, 400_000);
        // ∫₀^T ~ T^{0.1}/0.1 keeps growing; doubling T adds a fixed chunk
        assert!(b > a * 1.05, "{a} {b}");
        assert!(s.at(1e12) < 1e-10);
    }

    proptest! {
        #[test]
        fn eval_is_positive_and_nonincreasing(
            gamma0 in 1e-3f64..10.0,
            delta in 1e-3f64..10.0,
            eta in 0.501f64..0.999,
            s in 0.0f64..1e6,
            gap in 0.0f64..1e6,
        ) {
            let sched = LearningRateSchedule::new(gamma0, delta, eta);
            let a = sched.eval(s).unwrap();
            let b = sched.eval(s + gap).unwrap();
            prop_assert!(a > 0.0 && b > 0.0);
            prop_assert!(a >= b);
        }
    }
}
