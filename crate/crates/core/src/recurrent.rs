//! Recurrent-event submodels for the hospitalization process.
//!
//! A [`HospitalizationHistory`] is a realized history on `[0, T)`: the event
//! count and the strictly increasing event times. The hazard at `t` only sees
//! events strictly before `t`, so the intensity is left-continuous and at an
//! event time it still uses the previous gap.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazards::BaselineHazard;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubmodelKind {
    /// Calendar time scale: hazard depends on time since entry only.
    Poisson,
    /// Gap time scale: hazard depends on time since the last event.
    Renewal,
}

impl fmt::Display for SubmodelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubmodelKind::Poisson => "poisson",
            SubmodelKind::Renewal => "renewal",
        })
    }
}

impl FromStr for SubmodelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(SubmodelKind::Poisson),
            "renewal" => Ok(SubmodelKind::Renewal),
            other => Err(Error::Usage(format!("unknown submodel '{other}' (poisson|renewal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HospitalizationHistory {
    horizon: f64,
    times: Vec<f64>,
}

impl HospitalizationHistory {
    /// Validates `0 < t_1 < ... < t_J < horizon`.
    pub fn new(horizon: f64, times: Vec<f64>) -> Result<Self> {
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::History(format!("horizon must be finite and >= 0, got {horizon}")));
        }
        let mut prev = 0.0;
        for (j, &t) in times.iter().enumerate() {
            if !(t > prev) {
                return Err(Error::History(format!("event {} at {t} is not strictly after {prev}", j + 1)));
            }
            prev = t;
        }
        if !times.is_empty() && !(prev < horizon) {
            return Err(Error::History(format!("last event at {prev} is not strictly before the horizon {horizon}")));
        }
        Ok(Self { horizon, times })
    }

    pub fn empty(horizon: f64) -> Result<Self> {
        Self::new(horizon, Vec::new())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn count(&self) -> usize {
        self.times.len()
    }

    /// Number of events strictly before `t`.
    pub fn count_before(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x < t)
    }

    /// Time of the last event strictly before `t`, or 0 when there is none.
    pub fn last_event_before(&self, t: f64) -> f64 {
        match self.count_before(t) {
            0 => 0.0,
            j => self.times[j - 1],
        }
    }

    /// Gap lengths `t_j - t_{j-1}` for `j = 1..=J+1`, with `t_0 = 0` and `t_{J+1} = T`.
    pub fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        let starts = std::iter::once(0.0).chain(self.times.iter().copied());
        let ends = self.times.iter().copied().chain(std::iter::once(self.horizon));
        starts.zip(ends).map(|(a, b)| b - a)
    }

    /// The history as seen at time `t`: horizon `t`, events strictly before `t`.
    pub fn history_at(&self, t: f64) -> Result<Self> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(Error::Range(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        let j = self.count_before(t);
        Ok(Self { horizon: t, times: self.times[..j].to_vec() })
    }
}

/// Hazard of the next event at `t` given the history before `t`.
pub fn hazard_given_history<B: BaselineHazard + ?Sized>(
    kind: SubmodelKind,
    baseline: &B,
    history: &HospitalizationHistory,
    t: f64,
) -> Result<f64> {
    if !(t >= 0.0 && t <= history.horizon()) {
        return Err(Error::Range(format!("t = {t} outside [0, {}]", history.horizon())));
    }
    match kind {
        SubmodelKind::Poisson => baseline.hazard(t),
        SubmodelKind::Renewal => baseline.hazard(t - history.last_event_before(t)),
    }
}

/// Integrated hazard over `[0, T]`. Renewal gaps are integrated in closed
/// form through the baseline cumulative hazard, so shapes below one are safe.
pub fn cumulative_hazard_given_history<B: BaselineHazard + ?Sized>(
    kind: SubmodelKind,
    baseline: &B,
    history: &HospitalizationHistory,
) -> Result<f64> {
    match kind {
        SubmodelKind::Poisson => baseline.cumulative_hazard(history.horizon()),
        SubmodelKind::Renewal => history.gaps().try_fold(0.0, |acc, gap| Ok(acc + baseline.cumulative_hazard(gap)?)),
    }
}

pub fn survival_given_history<B: BaselineHazard + ?Sized>(
    kind: SubmodelKind,
    baseline: &B,
    history: &HospitalizationHistory,
) -> Result<f64> {
    Ok((-cumulative_hazard_given_history(kind, baseline, history)?).exp())
}

/// `sum_j log lambda^r(t_j | h(t_j))`, the event-time part of the history density.
pub fn log_hazard_at_events<B: BaselineHazard + ?Sized>(
    kind: SubmodelKind,
    baseline: &B,
    history: &HospitalizationHistory,
) -> Result<f64> {
    let mut prev = 0.0;
    let mut acc = 0.0;
    for &t in history.times() {
        let h = match kind {
            SubmodelKind::Poisson => baseline.hazard(t)?,
            SubmodelKind::Renewal => baseline.hazard(t - prev)?,
        };
        acc += h.ln();
        prev = t;
    }
    Ok(acc)
}
