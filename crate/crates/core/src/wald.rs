//! Wald test of the recurrent-hazard shape restriction `γ(σ_r - 1) = 0`.
//!
//! Under the null the hospitalization process does not inform death beyond
//! its count, for either submodel.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::fit::{exponent_shape_covariance, FitResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldReport {
    /// `R = γ(σ_r - 1)`.
    pub restriction: f64,
    /// `∇R = (σ_r - 1, γ)`.
    pub gradient: [f64; 2],
    pub statistic: f64,
    pub p_value: f64,
}

/// `covariance` is the `(γ, σ_r)` block of the estimator covariance.
pub fn wald_distribution_test(exponent: f64, recurrent_shape: f64, covariance: [[f64; 2]; 2]) -> Result<WaldReport> {
    if !exponent.is_finite() || !recurrent_shape.is_finite() || recurrent_shape <= 0.0 {
        return Err(Error::Parameter(format!(
            "need finite γ and σ_r > 0, got γ = {exponent}, σ_r = {recurrent_shape}"
        )));
    }
    let [[a, b], [c, d]] = covariance;
    if [a, b, c, d].iter().any(|v| !v.is_finite()) || a < 0.0 || d < 0.0 {
        return Err(Error::Parameter(format!("invalid covariance block {covariance:?}")));
    }
    let restriction = exponent * (recurrent_shape - 1.0);
    let gradient = [recurrent_shape - 1.0, exponent];
    if restriction == 0.0 {
        return Ok(WaldReport { restriction, gradient, statistic: 0.0, p_value: 1.0 });
    }
    let [g0, g1] = gradient;
    let quad = g0 * (a * g0 + b * g1) + g1 * (c * g0 + d * g1);
    if quad <= 0.0 {
        return Err(Error::DegenerateTest(quad));
    }
    let statistic = restriction * restriction / quad;
    // χ²₁ upper tail
    let p_value = erfc((statistic / 2.0).sqrt()).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(WaldReport { restriction, gradient, statistic, p_value })
}

pub fn wald_from_fit(result: &FitResult) -> Result<WaldReport> {
    wald_distribution_test(
        result.estimates.frailty_exponent,
        result.estimates.recurrent_baseline.shape,
        exponent_shape_covariance(result)?,
    )
}
