//! Dynamic prediction of death given the hospitalization history.
//!
//! Conditional on survival to `T` and the history `h(T)`, the probability of
//! death in `(T, T + w]` is a ratio of two frailty expectations:
//!
//! ```text
//!            E[ u^J  Sr(T|h)^{C_r u}  (S0d(T)^{C_d u^γ} - S0d(T+w)^{C_d u^γ}) ]
//! P(T, w) = --------------------------------------------------------------
//!            E[ u^J  Sr(T|h)^{C_r u}   S0d(T)^{C_d u^γ} ]
//! ```
//!
//! The numerator is evaluated as `S0d(T)^{C_d u^γ} (1 - exp(-ΔΛ C_d u^γ))`
//! so short windows keep full relative precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::hazards::{BaselineHazard, WeibullParams};
use crate::quadrature::{
    log_integrate_frailty, FrailtyKernel, FrailtyParams, Integral, QuadratureReport, QuadratureSpec,
};
use crate::recurrent::{cumulative_hazard_given_history, HospitalizationHistory, SubmodelKind};

/// Default hazard-ratio window, days.
pub const HAZARD_RATIO_WINDOW: f64 = 7.0;

/// Relative inward shift applied to a concentrated event placed at `T`.
pub const CONCENTRATED_CLIP: f64 = 1e-9;

/// Parameters of the joint model. Coefficients are log hazard ratios keyed by
/// covariate name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub submodel: SubmodelKind,
    /// Exponent of the frailty in the death hazard.
    pub frailty_exponent: f64,
    pub frailty: FrailtyParams,
    pub death_baseline: WeibullParams,
    pub recurrent_baseline: WeibullParams,
    #[serde(default)]
    pub death_coefficients: BTreeMap<String, f64>,
    #[serde(default)]
    pub recurrent_coefficients: BTreeMap<String, f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.death_baseline.validate()?;
        self.recurrent_baseline.validate()?;
        ensure_positive("frailty variance", self.frailty.variance)?;
        if !self.frailty_exponent.is_finite() {
            return Err(Error::Parameter(format!("frailty exponent must be finite, got {}", self.frailty_exponent)));
        }
        for (name, b) in self.death_coefficients.iter().chain(&self.recurrent_coefficients) {
            if !b.is_finite() {
                return Err(Error::Parameter(format!("coefficient '{name}' must be finite, got {b}")));
            }
        }
        Ok(())
    }

    /// Every covariate name used by either linear predictor.
    pub fn covariate_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            self.death_coefficients.keys().chain(self.recurrent_coefficients.keys()).cloned().collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Multipliers `C_d = exp(β_d'z)` and `C_r = exp(β_r'z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskMultipliers {
    pub death: f64,
    pub recurrent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateProfile {
    pub values: BTreeMap<String, f64>,
}

impl CovariateProfile {
    pub fn new(values: BTreeMap<String, f64>) -> Self {
        Self { values }
    }

    /// All covariates of `params` at zero, so both multipliers equal one.
    pub fn reference(params: &ModelParams) -> Self {
        Self { values: params.covariate_names().into_iter().map(|n| (n, 0.0)).collect() }
    }

    pub fn multipliers(&self, params: &ModelParams) -> Result<RiskMultipliers> {
        risk_multipliers(params, &self.values)
    }
}

/// `β'z` over the names in `coefficients`; every name must be present in `values`.
pub(crate) fn linear_predictor(coefficients: &BTreeMap<String, f64>, values: &BTreeMap<String, f64>) -> Result<f64> {
    coefficients.iter().try_fold(0.0, |acc, (name, b)| match values.get(name) {
        Some(z) if z.is_finite() => Ok(acc + b * z),
        Some(z) => Err(Error::Parameter(format!("covariate '{name}' is not finite ({z})"))),
        None => Err(Error::Parameter(format!("covariate profile is missing '{name}'"))),
    })
}

pub(crate) fn risk_multipliers(params: &ModelParams, values: &BTreeMap<String, f64>) -> Result<RiskMultipliers> {
    let m = RiskMultipliers {
        death: linear_predictor(&params.death_coefficients, values)?.exp(),
        recurrent: linear_predictor(&params.recurrent_coefficients, values)?.exp(),
    };
    ensure_positive("death multiplier", m.death)?;
    ensure_positive("recurrent multiplier", m.recurrent)?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionResult {
    pub probability: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub report: QuadratureReport,
}

/// Frailty-integral loads at horizon `T` for a given history.
#[derive(Debug, Clone, Copy)]
struct Loads {
    events: f64,
    death_at_horizon: f64,
    recurrent: f64,
}

fn loads(params: &ModelParams, mult: RiskMultipliers, history: &HospitalizationHistory) -> Result<Loads> {
    Ok(Loads {
        events: history.count() as f64,
        death_at_horizon: mult.death * params.death_baseline.cumulative_hazard(history.horizon())?,
        recurrent: mult.recurrent
            * cumulative_hazard_given_history(params.submodel, &params.recurrent_baseline, history)?,
    })
}

fn window_load(params: &ModelParams, mult: RiskMultipliers, horizon: f64, window: f64) -> Result<f64> {
    let d = &params.death_baseline;
    Ok(mult.death * (d.cumulative_hazard(horizon + window)? - d.cumulative_hazard(horizon)?))
}

fn check_window(window: f64) -> Result<()> {
    if !(window >= 0.0) || !window.is_finite() {
        return Err(Error::Domain(format!("prediction window must be finite and >= 0, got {window}")));
    }
    Ok(())
}

/// Ratio of the windowed to the plain kernel expectation.
fn window_ratio(
    frailty: FrailtyParams,
    kernel: FrailtyKernel,
    window_load: f64,
    spec: &QuadratureSpec,
) -> Result<PredictionResult> {
    let den = log_integrate_frailty(frailty, &kernel, spec)?;
    if window_load == 0.0 {
        return Ok(PredictionResult {
            probability: 0.0,
            numerator: 0.0,
            denominator: den.value.exp(),
            report: den.report,
        });
    }
    let num = log_integrate_frailty(frailty, &kernel.with_window(window_load), spec)?;
    let probability = (num.value - den.value).exp().clamp(0.0, 1.0);
    Ok(PredictionResult {
        probability,
        numerator: num.value.exp(),
        denominator: den.value.exp(),
        report: den.report.merge(num.report),
    })
}

/// Probability of death in `(T, T + window]` given survival to `T` and the
/// history `h(T)`, whose horizon is `T`.
pub fn risk_of_death(
    params: &ModelParams,
    profile: &CovariateProfile,
    history: &HospitalizationHistory,
    window: f64,
    spec: &QuadratureSpec,
) -> Result<PredictionResult> {
    params.validate()?;
    check_window(window)?;
    let mult = profile.multipliers(params)?;
    let l = loads(params, mult, history)?;
    let kernel = FrailtyKernel::new(l.events, l.death_at_horizon, params.frailty_exponent, l.recurrent);
    let e = window_load(params, mult, history.horizon(), window)?;
    window_ratio(params.frailty, kernel, e, spec)
}

/// Risk of death in `(T, T + window]` marginalized over the frailty without
/// conditioning on any hospitalization information.
pub fn unconditional_risk(
    params: &ModelParams,
    profile: &CovariateProfile,
    horizon: f64,
    window: f64,
    spec: &QuadratureSpec,
) -> Result<PredictionResult> {
    params.validate()?;
    check_window(window)?;
    if !(horizon >= 0.0) {
        return Err(Error::Domain(format!("horizon must be >= 0, got {horizon}")));
    }
    let mult = profile.multipliers(params)?;
    let b = mult.death * params.death_baseline.cumulative_hazard(horizon)?;
    let kernel = FrailtyKernel::new(0.0, b, params.frailty_exponent, 0.0);
    let e = window_load(params, mult, horizon, window)?;
    window_ratio(params.frailty, kernel, e, spec)
}

/// Ratio of the short-window death risks under two histories with the same
/// horizon.
pub fn hazard_ratio(
    params: &ModelParams,
    profile: &CovariateProfile,
    history: &HospitalizationHistory,
    reference: &HospitalizationHistory,
    window: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    if history.horizon() != reference.horizon() {
        return Err(Error::History(format!(
            "histories must share a horizon ({} vs {})",
            history.horizon(),
            reference.horizon()
        )));
    }
    if !(window > 0.0) {
        return Err(Error::Domain(format!("hazard-ratio window must be > 0, got {window}")));
    }
    let num = risk_of_death(params, profile, history, window, spec)?;
    let den = risk_of_death(params, profile, reference, window, spec)?;
    Ok(num.probability / den.probability)
}

/// `φ(x, y, v; J, γ) = E[(x^{u^γ} - y^{u^γ}) v^u u^J] / E[x^{u^γ} v^u u^J]`
/// under a gamma frailty of variance `frailty.variance`.
pub fn phi(
    x: f64,
    y: f64,
    v: f64,
    events: u32,
    exponent: f64,
    frailty: FrailtyParams,
    spec: &QuadratureSpec,
) -> Result<f64> {
    for (name, val) in [("x", x), ("y", y), ("v", v)] {
        if !(val > 0.0 && val < 1.0) {
            return Err(Error::Domain(format!("φ needs {name} in (0, 1), got {val}")));
        }
    }
    if y > x {
        return Err(Error::Domain(format!("φ needs y <= x, got x = {x}, y = {y}")));
    }
    let kernel = FrailtyKernel::new(events as f64, -x.ln(), exponent, -v.ln());
    Ok(window_ratio(frailty, kernel, x.ln() - y.ln(), spec)?.probability)
}

/// Posterior density of the frailty given survival to `T` and `h(T)`.
#[derive(Debug, Clone, Copy)]
pub struct FrailtyPosterior {
    frailty: FrailtyParams,
    kernel: FrailtyKernel,
    log_normalizer: f64,
    spec: QuadratureSpec,
}

impl FrailtyPosterior {
    pub fn density(&self, u: f64) -> f64 {
        use crate::quadrature::LogIntegrand;
        if !(u > 0.0) {
            return 0.0;
        }
        (self.kernel.log_f(u) + self.frailty.log_density(u) - self.log_normalizer).exp()
    }

    /// `E[u^p | T, h]`.
    pub fn moment(&self, power: f64) -> Result<f64> {
        let tilted = FrailtyKernel { power: self.kernel.power + power, ..self.kernel };
        let Integral { value, .. } = log_integrate_frailty(self.frailty, &tilted, &self.spec)?;
        Ok((value - self.log_normalizer).exp())
    }

    pub fn mean(&self) -> Result<f64> {
        self.moment(1.0)
    }
}

pub fn conditional_frailty_density(
    params: &ModelParams,
    profile: &CovariateProfile,
    history: &HospitalizationHistory,
    spec: &QuadratureSpec,
) -> Result<FrailtyPosterior> {
    params.validate()?;
    let mult = profile.multipliers(params)?;
    let l = loads(params, mult, history)?;
    let kernel = FrailtyKernel::new(l.events, l.death_at_horizon, params.frailty_exponent, l.recurrent);
    let log_normalizer = log_integrate_frailty(params.frailty, &kernel, spec)?.value;
    Ok(FrailtyPosterior { frailty: params.frailty, kernel, log_normalizer, spec: *spec })
}

/// Events at `jT/(J+1)`, `j = 1..=J`.
pub fn dispersed_times(events: usize, horizon: f64) -> Result<HospitalizationHistory> {
    if events == 0 || !(horizon > 0.0) {
        return Err(Error::Parameter(format!(
            "dispersed timing needs J >= 1 and T > 0, got J = {events}, T = {horizon}"
        )));
    }
    let step = horizon / (events + 1) as f64;
    HospitalizationHistory::new(horizon, (1..=events).map(|j| j as f64 * step).collect())
}

/// Events at `(100 - J + k)T/100`, `k = 1..=J`, with the last one pulled
/// inside the horizon by `CONCENTRATED_CLIP * T`.
pub fn concentrated_times(events: usize, horizon: f64) -> Result<HospitalizationHistory> {
    if !(1..100).contains(&events) || !(horizon > 0.0) {
        return Err(Error::Parameter(format!(
            "concentrated timing needs 1 <= J < 100 and T > 0, got J = {events}, T = {horizon}"
        )));
    }
    let times = (1..=events)
        .map(|k| {
            if k == events {
                horizon * (1.0 - CONCENTRATED_CLIP)
            } else {
                (100 - events + k) as f64 * horizon / 100.0
            }
        })
        .collect();
    HospitalizationHistory::new(horizon, times)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// `T + w`, days.
    pub time: f64,
    pub probability: f64,
}

/// `P(T, w)` along a nondecreasing grid of windows.
pub fn prediction_curve(
    params: &ModelParams,
    profile: &CovariateProfile,
    history: &HospitalizationHistory,
    windows: &[f64],
    spec: &QuadratureSpec,
) -> Result<Vec<CurvePoint>> {
    if windows.windows(2).any(|p| !(p[1] >= p[0])) {
        return Err(Error::Domain("window grid must be nondecreasing".into()));
    }
    windows
        .iter()
        .map(|&w| {
            let r = risk_of_death(params, profile, history, w, spec)?;
            Ok(CurvePoint { time: history.horizon() + w, probability: r.probability })
        })
        .collect()
}
