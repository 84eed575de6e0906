//! Noise schedules: the mixing coefficient `alpha(t)` and its exit rate.
//!
//! A schedule is the scalar half of the forward corruption process.  It fixes
//! `alpha(t) = exp(-fbar(t))` on `t in [0, 1]`, where `fbar` is the
//! integrated exit rate `fbar(t) = integral_0^t f(s) ds`.  Uniformization
//! needs all four views of the same curve: `alpha`, `fbar`, the pointwise
//! rate `f`, and the inverse `fbar^{-1}` used to place jump times.
//!
//! Invariants: `alpha(0) = 1`, `alpha` is non-increasing, `alpha(t) > 0`
//! everywhere (terminal floors keep `fbar(1)` finite), and
//! `exp(-fbar(t)) == alpha(t)` to near machine precision.

use alloc::vec::Vec;

use crate::math;

/// Default terminal floor: `alpha(1) = 1e-3`.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Tabulation size for [`Schedule::custom`]: `log alpha` sampled on a
/// uniform grid of this many points spanning `[0, 1]`.
pub const CUSTOM_GRID_POINTS: usize = 1024;

/// Bisection window below which `inverse_integrated_rate` stops for custom
/// schedules.
const BISECT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("time {t} outside the unit interval")]
    TimeOutOfRange { t: f64 },
    #[error("integrated rate {y} outside [0, {max}]")]
    RateOutOfRange { y: f64, max: f64 },
    #[error("terminal floor {eps} outside (0, 1)")]
    BadFloor { eps: f64 },
    #[error("custom table must have {expected} points, got {got}")]
    BadTableLength { expected: usize, got: usize },
    #[error("custom table invalid at index {index}: {reason}")]
    BadTable { index: usize, reason: &'static str },
    #[error("interval endpoints out of order: s = {s}, t = {t}")]
    IntervalOutOfOrder { s: f64, t: f64 },
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    /// `alpha(t) = 1 - (1 - eps) t`; the integrated rate is log-linear.
    LogLinear { eps: f64 },
    /// `alpha(t) = max(1 - t, eps)`; the floor clips the terminal sliver
    /// `t > 1 - eps` where the unfloored rate would diverge.
    Linear { eps: f64 },
    /// `log alpha` tabulated on a uniform grid, linearly interpolated.
    Custom { log_alpha: Vec<f64> },
}

/// A noise schedule on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: Kind,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::log_linear(DEFAULT_EPS).expect("default floor is valid")
    }
}

fn check_time(t: f64) -> Result<(), ScheduleError> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(ScheduleError::TimeOutOfRange { t });
    }
    Ok(())
}

fn check_floor(eps: f64) -> Result<(), ScheduleError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(ScheduleError::BadFloor { eps });
    }
    Ok(())
}

impl Schedule {
    /// Schedule with `alpha(t) = 1 - (1 - eps) t`.
    pub fn log_linear(eps: f64) -> Result<Self, ScheduleError> {
        check_floor(eps)?;
        Ok(Schedule {
            kind: Kind::LogLinear { eps },
        })
    }

    /// Schedule with `alpha(t) = 1 - t`, floored at `eps` near `t = 1`.
    pub fn linear(eps: f64) -> Result<Self, ScheduleError> {
        check_floor(eps)?;
        Ok(Schedule {
            kind: Kind::Linear { eps },
        })
    }

    /// Tabulated schedule.  `alpha` must hold [`CUSTOM_GRID_POINTS`] values
    /// on the uniform grid `t_i = i / (n - 1)`, starting at 1, positive and
    /// non-increasing.  Interpolation is linear in `log alpha`, which keeps
    /// the interpolant a valid schedule.
    pub fn custom(alpha: &[f64]) -> Result<Self, ScheduleError> {
        if alpha.len() != CUSTOM_GRID_POINTS {
            return Err(ScheduleError::BadTableLength {
                expected: CUSTOM_GRID_POINTS,
                got: alpha.len(),
            });
        }
        if math::abs(alpha[0] - 1.0) > 1e-12 {
            return Err(ScheduleError::BadTable {
                index: 0,
                reason: "alpha(0) must be 1",
            });
        }
        let mut log_alpha = Vec::with_capacity(alpha.len());
        for (i, &a) in alpha.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) || a.is_nan() {
                return Err(ScheduleError::BadTable {
                    index: i,
                    reason: "alpha must lie in (0, 1]",
                });
            }
            if i > 0 && a > alpha[i - 1] {
                return Err(ScheduleError::BadTable {
                    index: i,
                    reason: "alpha must be non-increasing",
                });
            }
            log_alpha.push(math::ln(a));
        }
        log_alpha[0] = 0.0;
        if log_alpha[alpha.len() - 1] >= 0.0 {
            return Err(ScheduleError::BadTable {
                index: alpha.len() - 1,
                reason: "alpha(1) must be strictly below 1",
            });
        }
        Ok(Schedule {
            kind: Kind::Custom { log_alpha },
        })
    }

    /// Mixing coefficient `alpha(t)`.
    pub fn alpha(&self, t: f64) -> Result<f64, ScheduleError> {
        check_time(t)?;
        Ok(match &self.kind {
            Kind::LogLinear { eps } => 1.0 - (1.0 - eps) * t,
            Kind::Linear { eps } => (1.0 - t).max(*eps),
            Kind::Custom { log_alpha } => math::exp(interp(log_alpha, t)),
        })
    }

    /// Integrated exit rate `fbar(t) = -ln alpha(t)`.
    pub fn integrated_rate(&self, t: f64) -> Result<f64, ScheduleError> {
        check_time(t)?;
        Ok(match &self.kind {
            Kind::LogLinear { eps } => -math::ln_1p(-(1.0 - eps) * t),
            Kind::Linear { eps } => {
                if 1.0 - t > *eps {
                    -math::ln_1p(-t)
                } else {
                    -math::ln(*eps)
                }
            }
            Kind::Custom { log_alpha } => -interp(log_alpha, t),
        })
    }

    /// Pointwise exit rate `f(t) = -alpha'(t) / alpha(t)`.  For custom
    /// schedules this is a centered finite difference of `fbar`.
    pub fn exit_rate(&self, t: f64) -> Result<f64, ScheduleError> {
        check_time(t)?;
        Ok(match &self.kind {
            Kind::LogLinear { eps } => (1.0 - eps) / (1.0 - (1.0 - eps) * t),
            Kind::Linear { eps } => {
                if 1.0 - t > *eps {
                    1.0 / (1.0 - t)
                } else {
                    0.0
                }
            }
            Kind::Custom { log_alpha } => {
                // Half a grid cell on each side, stencil shifted inward at
                // the boundary so it never leaves [0, 1].
                let h = 0.5 / (log_alpha.len() - 1) as f64;
                let lo = (t - h).max(0.0);
                let hi = (t + h).min(1.0);
                (interp(log_alpha, lo) - interp(log_alpha, hi)) / (hi - lo)
            }
        })
    }

    /// Integrated rate at the terminal time, `fbar(1)`.
    pub fn terminal_rate(&self) -> f64 {
        self.integrated_rate(1.0).expect("t = 1 is in range")
    }

    /// Inverse of `fbar`, used to transform uniform draws into jump times.
    /// On plateaus of `fbar` any preimage is acceptable; the choice carries
    /// zero probability mass.
    pub fn inverse_integrated_rate(&self, y: f64) -> Result<f64, ScheduleError> {
        let max = self.terminal_rate();
        if !(0.0..=max).contains(&y) || y.is_nan() {
            return Err(ScheduleError::RateOutOfRange { y, max });
        }
        Ok(match &self.kind {
            Kind::LogLinear { eps } => {
                (-math::exp_m1(-y) / (1.0 - eps)).min(1.0)
            }
            Kind::Linear { .. } => (-math::exp_m1(-y)).min(1.0),
            Kind::Custom { log_alpha } => {
                let target = -y;
                let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
                while hi - lo > BISECT_TOL {
                    let mid = 0.5 * (lo + hi);
                    if interp(log_alpha, mid) >= target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        })
    }

    /// Conditional mixing coefficient `alpha_{t|s} = alpha(t) / alpha(s)`
    /// for `s <= t`.
    pub fn alpha_ratio(&self, s: f64, t: f64) -> Result<f64, ScheduleError> {
        check_time(s)?;
        check_time(t)?;
        if s > t {
            return Err(ScheduleError::IntervalOutOfOrder { s, t });
        }
        Ok(math::exp(self.integrated_rate(s)? - self.integrated_rate(t)?))
    }
}

/// Linear interpolation of a uniform-grid table on `[0, 1]`.
fn interp(table: &[f64], t: f64) -> f64 {
    let n = table.len();
    let x = t * (n - 1) as f64;
    let i = (x as usize).min(n - 2);
    let frac = x - i as f64;
    table[i] + frac * (table[i + 1] - table[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn grid(n: usize) -> impl Iterator<Item = f64> {
        (0..=n).map(move |i| i as f64 / n as f64)
    }

    fn custom_from_log_linear(eps: f64) -> Schedule {
        let src = Schedule::log_linear(eps).unwrap();
        let table: Vec<f64> = (0..CUSTOM_GRID_POINTS)
            .map(|i| {
                let t = i as f64 / (CUSTOM_GRID_POINTS - 1) as f64;
                src.alpha(t).unwrap()
            })
            .collect();
        Schedule::custom(&table).unwrap()
    }

    #[test]
    fn endpoints() {
        let s = Schedule::log_linear(1e-3).unwrap();
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert!((s.alpha(1.0).unwrap() - 1e-3).abs() < 1e-15);
        assert_eq!(s.integrated_rate(0.0).unwrap(), 0.0);

        let lin = Schedule::linear(1e-3).unwrap();
        assert_eq!(lin.alpha(0.5).unwrap(), 0.5);
        assert!((lin.terminal_rate() - (-math::ln(1e-3))).abs() < 1e-12);
    }

    #[test]
    fn linear_exit_rate_values() {
        let lin = Schedule::linear(1e-3).unwrap();
        assert_eq!(lin.exit_rate(0.5).unwrap(), 2.0);
        assert_eq!(lin.exit_rate(0.0).unwrap(), 1.0);
        // Inside the floored sliver the schedule is flat.
        assert_eq!(lin.exit_rate(0.9999).unwrap(), 0.0);
    }

    #[test]
    fn alpha_matches_exp_of_integrated_rate() {
        for sched in [
            Schedule::log_linear(1e-3).unwrap(),
            Schedule::linear(1e-3).unwrap(),
            custom_from_log_linear(1e-3),
        ] {
            for t in grid(97) {
                let a = sched.alpha(t).unwrap();
                let f = sched.integrated_rate(t).unwrap();
                assert!(
                    (math::exp(-f) - a).abs() <= 1e-12,
                    "exp(-fbar) != alpha at t = {t}: {} vs {a}",
                    math::exp(-f)
                );
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        for sched in [
            Schedule::log_linear(1e-3).unwrap(),
            Schedule::linear(1e-2).unwrap(),
            custom_from_log_linear(1e-3),
        ] {
            for t in grid(53) {
                let y = sched.integrated_rate(t).unwrap();
                let back = sched.inverse_integrated_rate(y).unwrap();
                let y_back = sched.integrated_rate(back).unwrap();
                assert!(
                    (y_back - y).abs() < 1e-9,
                    "fbar(fbar^-1(y)) drifted: {y} -> {y_back}"
                );
            }
        }
    }

    #[test]
    fn exit_rate_matches_alpha_derivative() {
        // f(t) * alpha(t) == -d alpha/dt, checked by centered differences on
        // the interior.  Closed-form kinds are linear in t, so the finite
        // difference is exact up to rounding.
        let h = 1e-5;
        for sched in [
            Schedule::log_linear(1e-3).unwrap(),
            Schedule::linear(1e-3).unwrap(),
        ] {
            for i in 1..20 {
                let t = i as f64 / 20.0;
                let fd = (sched.alpha(t - h).unwrap() - sched.alpha(t + h).unwrap()) / (2.0 * h);
                let lhs = sched.exit_rate(t).unwrap() * sched.alpha(t).unwrap();
                assert!(
                    (lhs - fd).abs() / fd.abs() < 1e-6,
                    "rate mismatch at t = {t}: {lhs} vs {fd}"
                );
            }
        }
        // The tabulated kind differentiates an interpolant whose stencil can
        // straddle a grid knot and average two cell slopes; allow that.
        let custom = custom_from_log_linear(1e-3);
        for i in 1..20 {
            let t = i as f64 / 20.0;
            let fd = (custom.alpha(t - h).unwrap() - custom.alpha(t + h).unwrap()) / (2.0 * h);
            let lhs = custom.exit_rate(t).unwrap() * custom.alpha(t).unwrap();
            assert!(
                (lhs - fd).abs() / fd.abs() < 2e-2,
                "custom rate mismatch at t = {t}: {lhs} vs {fd}"
            );
        }
        // At a cell center the stencil spans exactly one linear piece of
        // log alpha, so the rate is the exact cell slope.
        let cell = 1.0 / (CUSTOM_GRID_POINTS - 1) as f64;
        for i in [100usize, 511, 900] {
            let t = (i as f64 + 0.5) * cell;
            let fd = (custom.alpha(t - h).unwrap() - custom.alpha(t + h).unwrap()) / (2.0 * h);
            let lhs = custom.exit_rate(t).unwrap() * custom.alpha(t).unwrap();
            assert!(
                (lhs - fd).abs() / fd.abs() < 1e-6,
                "custom cell-center rate mismatch at t = {t}: {lhs} vs {fd}"
            );
        }
    }

    #[test]
    fn domain_errors() {
        let s = Schedule::default();
        assert!(matches!(
            s.alpha(-0.1),
            Err(ScheduleError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            s.exit_rate(1.5),
            Err(ScheduleError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            s.inverse_integrated_rate(1e9),
            Err(ScheduleError::RateOutOfRange { .. })
        ));
        assert!(matches!(
            s.alpha_ratio(0.7, 0.2),
            Err(ScheduleError::IntervalOutOfOrder { .. })
        ));
        assert!(matches!(
            Schedule::log_linear(0.0),
            Err(ScheduleError::BadFloor { .. })
        ));
    }

    #[test]
    fn custom_table_validation() {
        assert!(matches!(
            Schedule::custom(&[1.0, 0.5]),
            Err(ScheduleError::BadTableLength { .. })
        ));
        let mut rising = alloc::vec![1.0; CUSTOM_GRID_POINTS];
        rising[1] = 0.9;
        rising[2] = 0.95;
        assert!(matches!(
            Schedule::custom(&rising),
            Err(ScheduleError::BadTable { index: 2, .. })
        ));
        let mut flat = alloc::vec![1.0; CUSTOM_GRID_POINTS];
        *flat.last_mut().unwrap() = 1.0;
        assert!(Schedule::custom(&flat).is_err());
    }

    #[test]
    fn alpha_ratio_composes() {
        let s = Schedule::default();
        let a = s.alpha_ratio(0.0, 0.3).unwrap() * s.alpha_ratio(0.3, 0.8).unwrap();
        let b = s.alpha_ratio(0.0, 0.8).unwrap();
        assert!((a - b).abs() < 1e-14);
    }
}
