//! Baseline hazard families.
//!
//! Every process in the joint model is driven by a covariate-free,
//! frailty-free baseline hazard. The engine only ships the Weibull family,
//! but prediction and the renewal machinery are written against
//! [`BaselineHazard`] so that other monotone families can be dropped in.
//!
//! Time is measured in days everywhere inside the engine.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};

/// Days per year used when converting user-facing horizons.
pub const DAYS_PER_YEAR: f64 = 365.0;

pub trait BaselineHazard {
    fn hazard(&self, t: f64) -> Result<f64>;

    fn cumulative_hazard(&self, t: f64) -> Result<f64>;

    fn survival(&self, t: f64) -> Result<f64> {
        Ok((-self.cumulative_hazard(t)?).exp())
    }

    /// Smallest `t` with `cumulative_hazard(t) = level`.
    fn inverse_cumulative_hazard(&self, level: f64) -> Result<f64>;
}

/// Weibull baseline with hazard `shape * t^(shape-1) / scale^shape`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    pub shape: f64,
    /// Days.
    pub scale: f64,
}

impl WeibullParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        let p = Self { shape, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("Weibull shape", self.shape)?;
        ensure_positive("Weibull scale", self.scale)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        self.validate()?;
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("time must be >= 0, got {t}")));
        }
        Ok(())
    }

    /// Natural log of the hazard; `t > 0` required.
    pub fn log_hazard(&self, t: f64) -> Result<f64> {
        let h = self.hazard(t)?;
        Ok(h.ln())
    }
}

impl BaselineHazard for WeibullParams {
    fn hazard(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        if t == 0.0 {
            return match self.shape {
                s if s < 1.0 => Err(Error::Domain(format!("Weibull hazard with shape {s} < 1 is infinite at t = 0"))),
                1.0 => Ok(1.0 / self.scale),
                _ => Ok(0.0),
            };
        }
        let log_h = self.shape.ln() + (self.shape - 1.0) * t.ln() - self.shape * self.scale.ln();
        Ok(log_h.exp())
    }

    fn cumulative_hazard(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok((t / self.scale).powf(self.shape))
    }

    fn inverse_cumulative_hazard(&self, level: f64) -> Result<f64> {
        self.validate()?;
        if !(level >= 0.0) {
            return Err(Error::Domain(format!("cumulative hazard level must be >= 0, got {level}")));
        }
        Ok(self.scale * level.powf(1.0 / self.shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn trivial_hazard_values() {
        assert_eq!(WeibullParams::new(1.0, 1.0).unwrap().hazard(5.0).unwrap(), 1.0);
        assert!(close(WeibullParams::new(2.0, 1.0).unwrap().hazard(3.0).unwrap(), 6.0, 1e-15));
    }

    #[test]
    fn reference_death_hazard_at_1000_days() {
        // direct evaluation of 1.723 * 1000^0.723 / 4487.937^1.723, and the
        // central difference of the cumulative hazard around the same point
        let p = WeibullParams::new(1.723, 4487.937).unwrap();
        let direct = 1.723 * 1000f64.powf(0.723) / 4487.937f64.powf(1.723);
        let h = p.hazard(1000.0).unwrap();
        assert!(close(h, direct, 1e-13));
        let dt = 1e-3;
        let fd = (p.cumulative_hazard(1000.0 + dt).unwrap() - p.cumulative_hazard(1000.0 - dt).unwrap()) / (2.0 * dt);
        assert!(close(h, fd, 1e-8), "{h} vs {fd}");
        assert!(close(h, 1.296_608_081e-4, 1e-8), "{h}");
    }

    #[test]
    fn cumulative_hazard_values() {
        let p = WeibullParams::new(0.77, 42.0).unwrap();
        assert!(close(p.cumulative_hazard(42.0).unwrap(), 1.0, 1e-15));
        assert_eq!(WeibullParams::new(1.0, 2.0).unwrap().cumulative_hazard(6.0).unwrap(), 3.0);
    }

    #[test]
    fn reference_recurrent_cumulative_hazard_matches_numeric_integral() {
        // composite Simpson after t = s^(1/shape), which makes the integrand
        // constant in s for a Weibull hazard (f(0) is taken as its limit)
        let p = WeibullParams::new(0.857, 3520.435).unwrap();
        let m = 1.0 / p.shape;
        let n = 2000;
        let top = 365f64.powf(p.shape);
        let h = top / n as f64;
        let f = |s: f64| m * s.powf(m - 1.0) * p.hazard(s.powf(m)).unwrap();
        let mut acc = f(h) + f(top);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let numeric = acc * h / 3.0;
        let closed = p.cumulative_hazard(365.0).unwrap();
        assert!((numeric - closed).abs() < 1e-10, "{numeric} vs {closed}");
    }

    #[test]
    fn survival_values() {
        let p = WeibullParams::new(1.0, 1.0).unwrap();
        assert_eq!(p.survival(0.0).unwrap(), 1.0);
        assert!(close(p.survival(2f64.ln()).unwrap(), 0.5, 1e-15));
        let p = WeibullParams::new(2.0, 10.0).unwrap();
        assert!(close(p.survival(10.0).unwrap(), (-1f64).exp(), 1e-15));
    }

    #[test]
    fn domain_and_parameter_errors() {
        assert!(matches!(WeibullParams::new(0.5, 1.0).unwrap().hazard(0.0), Err(Error::Domain(_))));
        assert!(matches!(WeibullParams::new(0.0, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(WeibullParams::new(1.0, -2.0), Err(Error::Parameter(_))));
        let p = WeibullParams::new(1.5, 1.0).unwrap();
        assert!(p.cumulative_hazard(-1.0).is_err());
        assert!(p.cumulative_hazard(f64::NAN).is_err());
        assert_eq!(p.hazard(0.0).unwrap(), 0.0);
    }

    #[test]
    fn inverse_cumulative_hazard_round_trip() {
        let p = WeibullParams::new(1.7, 4500.0).unwrap();
        for t in [1.0, 100.0, 4500.0, 20_000.0] {
            let l = p.cumulative_hazard(t).unwrap();
            assert!(close(p.inverse_cumulative_hazard(l).unwrap(), t, 1e-13));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn survival_is_exp_minus_cumulative(shape in 0.2f64..4.0, scale in 0.1f64..1e4, t in 0.0f64..2e4) {
                let p = WeibullParams::new(shape, scale).unwrap();
                let s = p.survival(t).unwrap();
                let c = p.cumulative_hazard(t).unwrap();
                prop_assert!((s - (-c).exp()).abs() <= 1e-12 * s.max(1e-300));
            }

            #[test]
            fn derivative_of_cumulative_is_hazard(shape in 0.2f64..4.0, scale in 0.5f64..1e4, log_t in -3.0f64..9.0) {
                let p = WeibullParams::new(shape, scale).unwrap();
                let t = log_t.exp();
                let dt = 1e-5 * t;
                let fd = (p.cumulative_hazard(t + dt).unwrap() - p.cumulative_hazard(t - dt).unwrap()) / (2.0 * dt);
                let h = p.hazard(t).unwrap();
                prop_assert!((fd - h).abs() <= 1e-6 * h, "fd {} h {}", fd, h);
            }

            #[test]
            fn hazard_monotonicity_follows_shape(shape in 0.2f64..4.0, scale in 0.5f64..100.0) {
                let p = WeibullParams::new(shape, scale).unwrap();
                let grid: Vec<f64> = (0..40).map(|i| 0.01 * 1.3f64.powi(i)).collect();
                for w in grid.windows(2) {
                    let (a, b) = (p.hazard(w[0]).unwrap(), p.hazard(w[1]).unwrap());
                    if shape > 1.0 { prop_assert!(b > a) }
                    else if shape < 1.0 { prop_assert!(b < a) }
                    else { prop_assert!(a == b) }
                }
            }
        }
    }
}
