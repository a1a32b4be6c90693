//! Noise schedules for the absorbing forward process.
//!
//! A schedule is the survival probability `alpha(t)`: the chance a token
//! is still uncorrupted at time `t`. `alpha(0) = 1`, `alpha(1) = 0`, and
//! the per-time loss weight is `-alpha'(t) / (1 - alpha(t))`. Only the
//! linear schedule `alpha(t) = 1 - t` is implemented; its weight is
//! exactly `1/t`, which is why training times are clamped away from 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Lower clamp for times fed to `loss_weight`; guards the 1/t pole.
    pub eps: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear()
    }
}

impl NoiseSchedule {
    pub fn linear() -> Self {
        Self { kind: ScheduleKind::Linear, eps: DEFAULT_T_EPS }
    }

    pub fn with_eps(eps: f64) -> Self {
        Self { kind: ScheduleKind::Linear, eps }
    }

    /// Survival probability at time `t in [0, 1]`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("alpha: t = {t} outside [0, 1]")));
        }
        match self.kind {
            ScheduleKind::Linear => Ok(1.0 - t),
        }
    }

    /// `-alpha'(t) / (1 - alpha(t))`; exactly `1/t` for the linear
    /// schedule. Defined on `[eps, 1]` only.
    pub fn loss_weight(&self, t: f64) -> Result<f64> {
        if t < self.eps || t > 1.0 {
            return Err(Error::domain(format!(
                "loss_weight: t = {t} outside [{}, 1]",
                self.eps
            )));
        }
        match self.kind {
            ScheduleKind::Linear => Ok(1.0 / t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_endpoints_and_interior() {
        let s = NoiseSchedule::linear();
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha(1.0).unwrap(), 0.0);
        assert!((s.alpha(0.3).unwrap() - 0.7).abs() < 1e-15);
        assert!(s.alpha(-0.1).is_err());
        assert!(s.alpha(1.1).is_err());
    }

    #[test]
    fn alpha_strictly_decreasing() {
        let s = NoiseSchedule::linear();
        let mut prev = s.alpha(0.0).unwrap();
        for i in 1..=100 {
            let a = s.alpha(i as f64 / 100.0).unwrap();
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn weight_is_one_over_t() {
        let s = NoiseSchedule::linear();
        assert_eq!(s.loss_weight(1.0).unwrap(), 1.0);
        assert_eq!(s.loss_weight(0.25).unwrap(), 4.0);
        assert_eq!(s.loss_weight(0.5).unwrap(), 2.0);
        assert!(s.loss_weight(0.5e-3).is_err());
        assert!(s.loss_weight(1.5).is_err());
    }

    /// The weight definition, checked against the closed form by central
    /// differences on alpha itself.
    #[test]
    fn weight_matches_finite_difference_of_alpha() {
        let s = NoiseSchedule::linear();
        let h = 1e-6;
        for &t in &[0.01, 0.1, 0.37, 0.5, 0.93] {
            let dalpha = (s.alpha(t + h).unwrap() - s.alpha(t - h).unwrap()) / (2.0 * h);
            let expect = -dalpha / (1.0 - s.alpha(t).unwrap());
            let got = s.loss_weight(t).unwrap();
            assert!((got - expect).abs() < 1e-6, "t={t}: {got} vs {expect}");
        }
    }
}
