//! Synthetic cohorts drawn from the joint model.
//!
//! Each patient has its own ChaCha stream (`seed`, stream = patient index),
//! so a cohort is reproducible regardless of evaluation order. Draws within
//! a patient happen in a fixed order: covariates by name, frailty, death
//! time, hospitalization path.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Exp1, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::hazards::BaselineHazard;
use crate::likelihood::{Cohort, PatientRecord};
use crate::predict::{risk_multipliers, ModelParams, RiskMultipliers};
use crate::recurrent::SubmodelKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "lowercase")]
pub enum CovariateDistribution {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
    Constant { value: f64 },
}

impl CovariateDistribution {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            Self::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            Self::Bernoulli { p } => (0.0..=1.0).contains(&p),
            Self::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid distribution for covariate '{name}': {self:?}")))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Normal { mean, sd } => Normal::new(mean, sd).expect("validated").sample(rng),
            Self::Bernoulli { p } => f64::from(u8::from(Bernoulli::new(p).expect("validated").sample(rng))),
            Self::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_patients: usize,
    pub params: ModelParams,
    #[serde(default)]
    pub covariates: BTreeMap<String, CovariateDistribution>,
    /// Administrative censoring time, days.
    pub admin_censoring: f64,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Parameter("n_patients must be >= 1".into()));
        }
        self.params.validate()?;
        ensure_positive("administrative censoring time", self.admin_censoring)?;
        for (name, dist) in &self.covariates {
            dist.validate(name)?;
        }
        for name in self.params.covariate_names() {
            if !self.covariates.contains_key(&name) {
                return Err(Error::Parameter(format!("no distribution given for covariate '{name}'")));
            }
        }
        Ok(())
    }
}

/// Independent stream for patient `index`.
pub fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Mean-one gamma frailty with variance `variance`.
pub fn sample_frailty<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> Result<f64> {
    ensure_positive("frailty variance", variance)?;
    let gamma = Gamma::new(1.0 / variance, variance).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(gamma.sample(rng))
}

/// Death time with survival `S0d(t)^{C_d u^γ}`, by inversion.
pub fn sample_death_time<R: Rng + ?Sized>(
    frailty: f64,
    mult: RiskMultipliers,
    params: &ModelParams,
    rng: &mut R,
) -> Result<f64> {
    ensure_positive("frailty", frailty)?;
    let e: f64 = rng.sample(Exp1);
    params.death_baseline.inverse_cumulative_hazard(e / (mult.death * frailty.powf(params.frailty_exponent)))
}

/// Hospitalization times in `(0, horizon)` under intensity `u C_r λr(t|H(t))`.
pub fn sample_hospitalization_path<R: Rng + ?Sized>(
    frailty: f64,
    mult: RiskMultipliers,
    params: &ModelParams,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    ensure_positive("frailty", frailty)?;
    let rate = frailty * mult.recurrent;
    let base = &params.recurrent_baseline;
    let mut times: Vec<f64> = Vec::new();
    let mut level = 0.0;
    loop {
        let e: f64 = rng.sample(Exp1);
        let t = match params.submodel {
            SubmodelKind::Renewal => times.last().copied().unwrap_or(0.0) + base.inverse_cumulative_hazard(e / rate)?,
            SubmodelKind::Poisson => {
                level += e / rate;
                base.inverse_cumulative_hazard(level)?
            }
        };
        if !(t < horizon) {
            return Ok(times);
        }
        // gaps below floating resolution cannot be represented
        if times.last().map_or(t > 0.0, |&last| t > last) {
            times.push(t);
        }
    }
}

/// One simulated patient with its latent frailty.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPatient {
    pub record: PatientRecord,
    pub frailty: f64,
    /// Uncensored death time.
    pub death_time: f64,
}

pub fn simulate_patient(config: &SimulationConfig, index: usize) -> Result<SimulatedPatient> {
    let mut rng = patient_rng(config.seed, index);
    let covariates: BTreeMap<String, f64> =
        config.covariates.iter().map(|(name, d)| (name.clone(), d.sample(&mut rng))).collect();
    let mult = risk_multipliers(&config.params, &covariates)?;
    let frailty = sample_frailty(config.params.frailty.variance, &mut rng)?;
    let death_time = sample_death_time(frailty, mult, &config.params, &mut rng)?;
    let follow_up = death_time.min(config.admin_censoring);
    let times = sample_hospitalization_path(frailty, mult, &config.params, follow_up, &mut rng)?;
    let record = PatientRecord::new(
        (index + 1).to_string(),
        follow_up,
        death_time <= config.admin_censoring,
        times,
        covariates,
    )?;
    Ok(SimulatedPatient { record, frailty, death_time })
}

/// Cohort of `config.n_patients` records, censored at
/// `min(death, admin_censoring)`.
pub fn simulate_cohort(config: &SimulationConfig) -> Result<Cohort> {
    config.validate()?;
    let patients: Result<Vec<PatientRecord>> =
        (0..config.n_patients).into_par_iter().map(|i| simulate_patient(config, i).map(|p| p.record)).collect();
    Cohort::new(patients?)
}
