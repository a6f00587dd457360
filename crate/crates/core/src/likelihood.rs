//! Marginal likelihood of the joint model.
//!
//! Given the frailty, a patient contributes the death density or survival at
//! the end of follow-up and the density of the observed hospitalization
//! history. Integrating the frailty out leaves, per patient,
//!
//! ```text
//! ln L = c + ln E[ u^A exp(-B u^γ - D u) ]
//! A = J + γδ,  B = C_d Λd(T),  D = C_r Λr(T | h)
//! c = δ (ln C_d + ln λd(T)) + J ln C_r + Σ_j ln λr(t_j | h(t_j))
//! ```
//!
//! The gradient with respect to the free parameter vector is analytic: the
//! derivative of `ln E[...]` is a posterior expectation, computed on the same
//! quadrature nodes as the integral.

use std::collections::BTreeMap;

use rayon::prelude::*;
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::hazards::WeibullParams;
use crate::predict::{linear_predictor, ModelParams};
use crate::quadrature::{frailty_expectations, log_integrate_frailty, FrailtyKernel, FrailtyParams, QuadratureSpec};
use crate::recurrent::{HospitalizationHistory, SubmodelKind};

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// Death or censoring time, days.
    pub follow_up: f64,
    pub death_observed: bool,
    pub history: HospitalizationHistory,
    pub covariates: BTreeMap<String, f64>,
}

impl PatientRecord {
    pub fn new(
        id: impl Into<String>,
        follow_up: f64,
        death_observed: bool,
        hospitalizations: Vec<f64>,
        covariates: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if !(follow_up > 0.0) || !follow_up.is_finite() {
            return Err(Error::History(format!("follow-up must be finite and > 0, got {follow_up}")));
        }
        let history = HospitalizationHistory::new(follow_up, hospitalizations)?;
        Ok(Self { id: id.into(), follow_up, death_observed, history, covariates })
    }

    pub fn event_count(&self) -> usize {
        self.history.count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn new(patients: Vec<PatientRecord>) -> Result<Self> {
        if patients.is_empty() {
            return Err(Error::Parameter("cohort must contain at least one patient".into()));
        }
        Ok(Self { patients })
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn into_patients(self) -> Vec<PatientRecord> {
        self.patients
    }

    pub fn death_count(&self) -> usize {
        self.patients.iter().filter(|p| p.death_observed).count()
    }

    pub fn event_count(&self) -> usize {
        self.patients.iter().map(PatientRecord::event_count).sum()
    }

    pub fn mean_follow_up(&self) -> f64 {
        self.patients.iter().map(|p| p.follow_up).sum::<f64>() / self.len() as f64
    }
}

/// Coordinates in which the likelihood is maximized: coefficients and the
/// frailty exponent as is, positive parameters on the log scale.
///
/// Order: death coefficients, recurrent coefficients, frailty exponent,
/// ln frailty variance, ln death shape, ln death scale, ln recurrent shape,
/// ln recurrent scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub submodel: SubmodelKind,
    pub death_names: Vec<String>,
    pub recurrent_names: Vec<String>,
}

/// Index of each structural parameter after the coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structural {
    FrailtyExponent = 0,
    FrailtyVariance = 1,
    DeathShape = 2,
    DeathScale = 3,
    RecurrentShape = 4,
    RecurrentScale = 5,
}

impl ParameterLayout {
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            submodel: params.submodel,
            death_names: params.death_coefficients.keys().cloned().collect(),
            recurrent_names: params.recurrent_coefficients.keys().cloned().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.death_names.len() + self.recurrent_names.len() + 6
    }

    pub fn index(&self, which: Structural) -> usize {
        self.death_names.len() + self.recurrent_names.len() + which as usize
    }

    /// Display names on the natural scale, in layout order.
    pub fn names(&self) -> Vec<String> {
        self.death_names
            .iter()
            .map(|n| format!("death.{n}"))
            .chain(self.recurrent_names.iter().map(|n| format!("recurrent.{n}")))
            .chain(
                [
                    "frailty_exponent",
                    "frailty_variance",
                    "death_shape",
                    "death_scale",
                    "recurrent_shape",
                    "recurrent_scale",
                ]
                .map(String::from),
            )
            .collect()
    }

    pub fn to_free(&self, params: &ModelParams) -> Result<Vec<f64>> {
        params.validate()?;
        let coef = |map: &BTreeMap<String, f64>, names: &[String]| -> Result<Vec<f64>> {
            names
                .iter()
                .map(|n| map.get(n).copied().ok_or_else(|| Error::Parameter(format!("missing coefficient '{n}'"))))
                .collect()
        };
        let mut x = coef(&params.death_coefficients, &self.death_names)?;
        x.extend(coef(&params.recurrent_coefficients, &self.recurrent_names)?);
        x.extend([
            params.frailty_exponent,
            params.frailty.variance.ln(),
            params.death_baseline.shape.ln(),
            params.death_baseline.scale.ln(),
            params.recurrent_baseline.shape.ln(),
            params.recurrent_baseline.scale.ln(),
        ]);
        Ok(x)
    }

    pub fn to_params(&self, free: &[f64]) -> ModelParams {
        let nd = self.death_names.len();
        let nr = self.recurrent_names.len();
        let s = &free[nd + nr..];
        ModelParams {
            submodel: self.submodel,
            frailty_exponent: s[0],
            frailty: FrailtyParams { variance: s[1].exp() },
            death_baseline: WeibullParams { shape: s[2].exp(), scale: s[3].exp() },
            recurrent_baseline: WeibullParams { shape: s[4].exp(), scale: s[5].exp() },
            death_coefficients: self.death_names.iter().cloned().zip(free[..nd].iter().copied()).collect(),
            recurrent_coefficients: self
                .recurrent_names
                .iter()
                .cloned()
                .zip(free[nd..nd + nr].iter().copied())
                .collect(),
        }
    }

    /// Natural-scale values and `d natural / d free` (diagonal).
    pub fn natural_with_jacobian(&self, free: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let first_log = self.index(Structural::FrailtyVariance);
        free.iter().enumerate().map(|(i, &x)| if i >= first_log { (x.exp(), x.exp()) } else { (x, 1.0) }).unzip()
    }
}

/// Precomputed baseline terms of the recurrent process for one record.
struct RecurrentTerms {
    /// `Λr(T|h)` and its derivative in `ln σ_r`.
    cumulative: f64,
    cumulative_d_log_shape: f64,
    /// `Σ ln λr(t_j | h(t_j))` and its derivative in `ln σ_r`.
    log_hazard_sum: f64,
    log_hazard_sum_d_log_shape: f64,
}

fn recurrent_terms(kind: SubmodelKind, w: &WeibullParams, history: &HospitalizationHistory) -> Result<RecurrentTerms> {
    let (shape, scale) = (w.shape, w.scale);
    let mut out = RecurrentTerms {
        cumulative: 0.0,
        cumulative_d_log_shape: 0.0,
        log_hazard_sum: 0.0,
        log_hazard_sum_d_log_shape: 0.0,
    };
    let mut add_cumulative = |x: f64| {
        if x > 0.0 {
            let l = (x / scale).ln();
            let c = (shape * l).exp();
            out.cumulative += c;
            out.cumulative_d_log_shape += c * shape * l;
        }
    };
    match kind {
        SubmodelKind::Poisson => add_cumulative(history.horizon()),
        SubmodelKind::Renewal => history.gaps().for_each(&mut add_cumulative),
    }
    let mut prev = 0.0;
    for &t in history.times() {
        let x = match kind {
            SubmodelKind::Poisson => t,
            SubmodelKind::Renewal => t - prev,
        };
        prev = t;
        if !(x > 0.0) {
            return Err(Error::History(format!("hospitalization at {t} has a non-positive gap")));
        }
        let l = (x / scale).ln();
        out.log_hazard_sum += shape.ln() - x.ln() + shape * l;
        out.log_hazard_sum_d_log_shape += 1.0 + shape * l;
    }
    Ok(out)
}

/// Log-likelihood of one patient and, on request, its gradient with respect
/// to the free vector of `layout` (added into `grad`).
fn patient_contribution(
    record: &PatientRecord,
    params: &ModelParams,
    layout: Option<&ParameterLayout>,
    spec: &QuadratureSpec,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let t = record.follow_up;
    let delta = if record.death_observed { 1.0 } else { 0.0 };
    let events = record.event_count() as f64;
    let g = params.frailty_exponent;
    let (sd, bd) = (params.death_baseline.shape, params.death_baseline.scale);
    let sr = params.recurrent_baseline.shape;

    let eta_d = linear_predictor(&params.death_coefficients, &record.covariates)?;
    let eta_r = linear_predictor(&params.recurrent_coefficients, &record.covariates)?;
    let log_t_over_b = (t / bd).ln();
    let death_load = (eta_d + sd * log_t_over_b).exp();
    let log_death_hazard = sd.ln() - t.ln() + sd * log_t_over_b;
    let rec = recurrent_terms(params.submodel, &params.recurrent_baseline, &record.history)?;
    let c_r = eta_r.exp();
    let recurrent_load = c_r * rec.cumulative;

    let constant = delta * (eta_d + log_death_hazard) + events * eta_r + rec.log_hazard_sum;
    let kernel = FrailtyKernel::new(events + g * delta, death_load, g, recurrent_load);

    let Some(grad) = grad else {
        let li = log_integrate_frailty(params.frailty, &kernel, spec)?.value;
        return Ok(constant + li);
    };
    let layout = layout.expect("gradient requested without a layout");

    let pow_g = |u: f64| u.powf(g);
    let id = |u: f64| u;
    let pow_g_ln = |u: f64| u.powf(g) * u.ln();
    let ln = |u: f64| u.ln();
    let e = frailty_expectations(params.frailty, &kernel, spec, &[&pow_g, &id, &pow_g_ln, &ln])?;
    let (e_pow, e_u, e_pow_ln, e_ln) = (e.values[0], e.values[1], e.values[2], e.values[3]);

    let d_death_load = -e_pow;
    let d_recurrent_load = -e_u;
    let k = params.frailty.shape();
    let d_log_variance = -k * (k.ln() + 1.0 - digamma(k) + e_ln - e_u);

    let nd = layout.death_names.len();
    for (i, name) in layout.death_names.iter().enumerate() {
        let z = record.covariates.get(name).copied().unwrap_or(0.0);
        grad[i] += z * (delta + d_death_load * death_load);
    }
    for (i, name) in layout.recurrent_names.iter().enumerate() {
        let z = record.covariates.get(name).copied().unwrap_or(0.0);
        grad[nd + i] += z * (events + d_recurrent_load * recurrent_load);
    }
    let at = |s: Structural| layout.index(s);
    grad[at(Structural::FrailtyExponent)] += delta * e_ln - death_load * e_pow_ln;
    grad[at(Structural::FrailtyVariance)] += d_log_variance;
    grad[at(Structural::DeathShape)] +=
        delta * (1.0 + sd * log_t_over_b) + d_death_load * death_load * sd * log_t_over_b;
    grad[at(Structural::DeathScale)] += -delta * sd - d_death_load * sd * death_load;
    grad[at(Structural::RecurrentShape)] +=
        rec.log_hazard_sum_d_log_shape + d_recurrent_load * c_r * rec.cumulative_d_log_shape;
    grad[at(Structural::RecurrentScale)] += -events * sr - d_recurrent_load * sr * recurrent_load;

    Ok(constant + e.log_integral)
}

pub fn patient_log_likelihood(record: &PatientRecord, params: &ModelParams, spec: &QuadratureSpec) -> Result<f64> {
    params.validate()?;
    patient_contribution(record, params, None, spec, None)
}

/// Sum of patient contributions. Patients are evaluated in parallel and
/// summed in cohort order, so the value does not depend on scheduling.
pub fn cohort_log_likelihood(cohort: &Cohort, params: &ModelParams, spec: &QuadratureSpec) -> Result<f64> {
    params.validate()?;
    let parts: Vec<Result<f64>> =
        cohort.patients.par_iter().map(|r| patient_contribution(r, params, None, spec, None)).collect();
    let mut total = 0.0;
    for (index, part) in parts.into_iter().enumerate() {
        total += part.map_err(|e| Error::Patient { index, source: Box::new(e) })?;
    }
    Ok(total)
}

/// Cohort log-likelihood and its gradient at the free vector `free`.
pub fn cohort_log_likelihood_with_gradient(
    cohort: &Cohort,
    layout: &ParameterLayout,
    free: &[f64],
    spec: &QuadratureSpec,
) -> Result<(f64, Vec<f64>)> {
    let params = layout.to_params(free);
    params.validate()?;
    let dim = layout.dim();
    let parts: Vec<Result<(f64, Vec<f64>)>> = cohort
        .patients
        .par_iter()
        .map(|r| {
            let mut g = vec![0.0; dim];
            let ll = patient_contribution(r, &params, Some(layout), spec, Some(&mut g))?;
            Ok((ll, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for (index, part) in parts.into_iter().enumerate() {
        let (ll, g) = part.map_err(|e| Error::Patient { index, source: Box::new(e) })?;
        total += ll;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grad))
}
