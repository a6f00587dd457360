//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use jointfrail::fit::{default_init, fit, FitOptions};
use jointfrail::hazards::{BaselineHazard, WeibullParams, DAYS_PER_YEAR};
use jointfrail::io::load_params;
use jointfrail::likelihood::{patient_log_likelihood, PatientRecord};
use jointfrail::predict::{
    concentrated_times, dispersed_times, hazard_ratio, phi, risk_of_death, CovariateProfile, ModelParams,
    HAZARD_RATIO_WINDOW,
};
use jointfrail::quadrature::{log_integrate_frailty, FrailtyKernel, FrailtyParams, QuadratureSpec, Scheme};
use jointfrail::recurrent::{
    cumulative_hazard_given_history, log_hazard_at_events, survival_given_history, HospitalizationHistory, SubmodelKind,
};
use jointfrail::simulate::{sample_frailty, simulate_cohort, CovariateDistribution, SimulationConfig};
use jointfrail::wald::wald_distribution_test;
use jointfrail::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

const YEARS: [f64; 5] = [1.0, 2.0, 4.0, 6.0, 8.0];

const RENEWAL_HR: [[f64; 5]; 5] = [
    [1.906, 1.898, 1.895, 1.901, 1.91],
    [2.659, 2.646, 2.638, 2.648, 2.669],
    [3.317, 3.308, 3.299, 3.313, 3.343],
    [3.892, 3.903, 3.904, 3.923, 3.962],
    [4.383, 4.435, 4.467, 4.493, 4.54],
];

const POISSON_HR: [[f64; 5]; 5] = [
    [2.118, 2.130, 2.150, 2.168, 2.186],
    [3.01, 3.054, 3.106, 3.147, 3.187],
    [3.745, 3.849, 3.959, 4.025, 4.088],
    [4.334, 4.525, 4.736, 4.838, 4.923],
    [4.793, 5.084, 5.444, 5.601, 5.709],
];

/// Concentrated over dispersed, renewal model, J = 2..5.
const TIMING_HR: [[f64; 5]; 4] = [
    [1.017, 1.027, 1.041, 1.048, 1.052],
    [1.019, 1.033, 1.050, 1.059, 1.065],
    [1.02, 1.035, 1.056, 1.068, 1.074],
    [1.019, 1.035, 1.06, 1.074, 1.081],
];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn reference(kind: SubmodelKind) -> Result<ModelParams> {
    load_params(&data(match kind {
        SubmodelKind::Renewal => "reference_renewal.toml",
        SubmodelKind::Poisson => "reference_poisson.toml",
    }))
}

fn spec() -> QuadratureSpec {
    QuadratureSpec::default()
}

fn history(events: usize, horizon: f64, concentrated: bool) -> Result<HospitalizationHistory> {
    match (events, concentrated) {
        (0, _) => HospitalizationHistory::empty(horizon),
        (j, false) => dispersed_times(j, horizon),
        (j, true) => concentrated_times(j, horizon),
    }
}

fn random_history<R: Rng>(rng: &mut R, events: usize, horizon: f64) -> Result<HospitalizationHistory> {
    loop {
        let mut t: Vec<f64> = (0..events).map(|_| rng.gen_range(0.0005..0.9995) * horizon).collect();
        t.sort_by(f64::total_cmp);
        if t.windows(2).all(|p| p[1] > p[0]) {
            return HospitalizationHistory::new(horizon, t);
        }
    }
}

fn bare(kind: SubmodelKind, exponent: f64, variance: f64, recurrent_shape: f64) -> ModelParams {
    ModelParams {
        submodel: kind,
        frailty_exponent: exponent,
        frailty: FrailtyParams { variance },
        death_baseline: WeibullParams { shape: 1.7, scale: 4500.0 },
        recurrent_baseline: WeibullParams { shape: recurrent_shape, scale: 3500.0 },
        death_coefficients: BTreeMap::new(),
        recurrent_coefficients: BTreeMap::new(),
    }
}

/// Short-window risk with the frailty integral cut at `u_max`, by Simpson's
/// rule in `s = ln u`.
fn truncated_risk(params: &ModelParams, h: &HospitalizationHistory, window: f64, u_max: f64) -> Result<f64> {
    let d = params.death_baseline;
    let t = h.horizon();
    let death_load = d.cumulative_hazard(t)?;
    let window_load = d.cumulative_hazard(t + window)? - death_load;
    let rec_load = cumulative_hazard_given_history(params.submodel, &params.recurrent_baseline, h)?;
    let (j, g, f) = (h.count() as f64, params.frailty_exponent, params.frailty);
    let n = 40_000;
    let (lo, hi) = (-40.0, u_max.ln());
    let step = (hi - lo) / n as f64;
    let mut den = Vec::with_capacity(n + 1);
    let mut num = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let s = lo + step * i as f64;
        let u = s.exp();
        let w: f64 = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let base = w.ln() + f.log_density(u) + s + j * s - death_load * u.powf(g) - rec_load * u;
        den.push(base);
        num.push(base + (-(-window_load * u.powf(g)).exp_m1()).ln());
    }
    let lse = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    Ok((lse(&num) - lse(&den)).exp())
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    intercept: f64,
    slope: f64,
}

impl BaselineHazard for Affine {
    fn hazard(&self, t: f64) -> Result<f64> {
        Ok(self.intercept + self.slope * t)
    }

    fn cumulative_hazard(&self, t: f64) -> Result<f64> {
        Ok(self.intercept * t + 0.5 * self.slope * t * t)
    }

    fn inverse_cumulative_hazard(&self, _level: f64) -> Result<f64> {
        unreachable!("not sampled")
    }
}

fn worked_cumulative_hazard() -> Result<Verdict> {
    let increasing = Affine { intercept: 0.0, slope: 1.0 };
    let decreasing = Affine { intercept: 12.0, slope: -1.0 };
    let a = HospitalizationHistory::new(12.0, vec![4.0, 8.0])?;
    let b = HospitalizationHistory::new(12.0, vec![8.0, 10.0])?;
    let cum =
        |base: &Affine, h: &HospitalizationHistory| cumulative_hazard_given_history(SubmodelKind::Renewal, base, h);
    let (a1, a2) = (cum(&increasing, &a)?, cum(&decreasing, &a)?);
    let (b1, b2) = (cum(&increasing, &b)?, cum(&decreasing, &b)?);
    let pass = (a1 - 24.0).abs() <= 1e-9
        && (a2 - 120.0).abs() <= 1e-9
        && (b1 - 36.0).abs() <= 1e-9
        && (b2 - 108.0).abs() <= 1e-9;
    Ok(Verdict::new(
        pass,
        format!(
            "dispersed {a1} / {a2} (want 24 / 120); concentrated {b1} / {b2} (want 36 / 108 by direct \
             integration; the printed example states 28 / 116)"
        ),
    ))
}

/// `(J, T years, expected, computed, computed with the integral cut at u = 10)`.
type Cell = (usize, f64, f64, f64, f64);

type Criterion = (&'static str, fn() -> Result<Verdict>);

fn hr_grid(params: &ModelParams, expected: &[[f64; 5]], first_j: usize, timing: bool) -> Result<Vec<Cell>> {
    let z = CovariateProfile::reference(params);
    let mut cells = Vec::new();
    for (r, row) in expected.iter().enumerate() {
        let j = first_j + r;
        for (c, &want) in row.iter().enumerate() {
            let t = YEARS[c] * DAYS_PER_YEAR;
            let (num, den) = if timing {
                (history(j, t, true)?, history(j, t, false)?)
            } else {
                (history(j, t, false)?, history(0, t, false)?)
            };
            let got = hazard_ratio(params, &z, &num, &den, HAZARD_RATIO_WINDOW, &spec())?;
            let cut = truncated_risk(params, &num, HAZARD_RATIO_WINDOW, 10.0)?
                / truncated_risk(params, &den, HAZARD_RATIO_WINDOW, 10.0)?;
            cells.push((j, YEARS[c], want, got, cut));
        }
    }
    Ok(cells)
}

fn summarize(cells: &[Cell], ok: impl Fn(f64, f64) -> bool) -> Verdict {
    let failing: Vec<String> = cells
        .iter()
        .filter(|c| !ok(c.3, c.2))
        .map(|&(j, t, want, got, _)| format!("J={j} T={t}: {got:.4} vs {want}"))
        .collect();
    let truncated_fails = cells.iter().filter(|c| !ok(c.4, c.2)).count();
    let mut detail = format!("{}/{} cells within tolerance", cells.len() - failing.len(), cells.len());
    if !failing.is_empty() {
        detail.push_str(&format!("; off: {}", failing.join(", ")));
    }
    detail.push_str(&format!(
        "; diagnostic with the frailty integral cut at u = 10: {}/{} cells within tolerance",
        cells.len() - truncated_fails,
        cells.len()
    ));
    Verdict::new(failing.is_empty(), detail)
}

fn poisson_hr_table() -> Result<Verdict> {
    let cells = hr_grid(&reference(SubmodelKind::Poisson)?, &POISSON_HR, 1, false)?;
    Ok(summarize(&cells, |got, want| (got - want).abs() <= 0.01 * want))
}

fn renewal_hr_table() -> Result<Verdict> {
    let cells = hr_grid(&reference(SubmodelKind::Renewal)?, &RENEWAL_HR, 1, false)?;
    Ok(summarize(&cells, |got, want| (got - want).abs() <= 0.02 * want))
}

fn timing_hr_table() -> Result<Verdict> {
    let cells = hr_grid(&reference(SubmodelKind::Renewal)?, &TIMING_HR, 2, true)?;
    Ok(summarize(&cells, |got, want| (got - want).abs() <= 0.005))
}

fn curve_point() -> Result<Verdict> {
    let value = |kind| -> Result<f64> {
        let p = reference(kind)?;
        let z = CovariateProfile::reference(&p);
        let h = dispersed_times(1, 2.0 * DAYS_PER_YEAR)?;
        Ok(risk_of_death(&p, &z, &h, 3.0 * DAYS_PER_YEAR, &spec())?.probability)
    };
    let renewal = value(SubmodelKind::Renewal)?;
    let poisson = value(SubmodelKind::Poisson)?;
    Ok(Verdict::new(
        (renewal - 0.2195).abs() <= 0.01,
        format!("renewal P(2y, 3y | 1 hosp) = {renewal:.5} (want 0.2195 ± 0.01); Poisson model gives {poisson:.5}"),
    ))
}

fn wald_machinery() -> Result<Verdict> {
    let v = [[0.04, 0.001], [0.001, 0.0009]];
    let zero_exponent = wald_distribution_test(0.0, 0.8, v)?;
    let unit_shape = wald_distribution_test(0.9, 1.0, v)?;
    let se = |lo: f64, hi: f64| (hi - lo) / 3.92;
    let (sg, ss) = (se(0.359, 1.101), se(0.789, 0.925));
    let r = wald_distribution_test(0.730, 0.857, [[sg * sg, 0.0], [0.0, ss * ss]])?;
    let pass = zero_exponent.statistic == 0.0
        && zero_exponent.p_value == 1.0
        && unit_shape.statistic == 0.0
        && (6.0..=10.0).contains(&r.statistic)
        && r.p_value < 0.05;
    Ok(Verdict::new(
        pass,
        format!(
            "γ=0 → W={}, σ_r=1 → W={}; diagonal covariance → W={:.3}, p={:.4} (6.3 needs the unpublished cross term)",
            zero_exponent.statistic, unit_shape.statistic, r.statistic, r.p_value
        ),
    ))
}

fn structural_properties() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut notes = Vec::new();
    let mut pass = true;

    // survival after J renewals lies between one gap of length T and J + 1 equal gaps
    let mut violations = 0;
    let histories = 10_000;
    for i in 0..histories {
        let j = 1 + i % 5;
        let shape = if rng.gen_bool(0.5) { rng.gen_range(0.3..0.95) } else { rng.gen_range(1.05..3.0) };
        let w = WeibullParams::new(shape, rng.gen_range(100.0..5000.0))?;
        let t = rng.gen_range(30.0..3000.0);
        let h = random_history(&mut rng, j, t)?;
        let s = survival_given_history(SubmodelKind::Renewal, &w, &h)?;
        let single = w.survival(t)?;
        let n = (j + 1) as f64;
        let equal = (-n * w.cumulative_hazard(t / n)?).exp();
        let (lo, hi) = if shape > 1.0 { (single, equal) } else { (equal, single) };
        if s < lo * (1.0 - 1e-12) || s > hi * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    pass &= violations == 0;
    notes.push(format!("gap bounds {violations}/{histories} violations"));

    // φ moves with v in the direction of sign(γ)
    let mut violations = 0;
    let samples = 2_000;
    for _ in 0..samples {
        let g = if rng.gen_bool(0.5) { rng.gen_range(-2.0..-0.05) } else { rng.gen_range(0.05..2.0) };
        let j = rng.gen_range(0..=6u32);
        let f = FrailtyParams::new(rng.gen_range(0.05..3.0))?;
        let y: f64 = rng.gen_range(0.05..0.9);
        let x = (y + rng.gen_range(0.05..0.9) * (0.999 - y)).min(0.999);
        let v = rng.gen_range(0.05..0.9);
        let d = phi(x, y, v + 0.05, j, g, f, &spec())? - phi(x, y, v, j, g, f, &spec())?;
        if d * g <= 0.0 {
            violations += 1;
        }
    }
    pass &= violations == 0;
    notes.push(format!("φ monotonicity {violations}/{samples} violations"));

    // E ξ^{1+γ} - E ξ E ξ^γ has the sign of γ under every tilt
    let mut violations = 0;
    for _ in 0..samples {
        let g = if rng.gen_bool(0.5) { rng.gen_range(-2.0..-0.05) } else { rng.gen_range(0.05..2.0) };
        let j = rng.gen_range(0..=8) as f64;
        let f = FrailtyParams::new(rng.gen_range(0.05..3.0))?;
        let (dl, rl) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
        let m = |extra: f64| -> Result<f64> {
            Ok(log_integrate_frailty(f, &FrailtyKernel::new(j + extra, dl, g, rl), &spec())?.value)
        };
        let base = m(0.0)?;
        let diff = (m(1.0 + g)? - base) - (m(1.0)? + m(g)? - 2.0 * base);
        if diff * g <= 0.0 {
            violations += 1;
        }
    }
    pass &= violations == 0;
    notes.push(format!("tilted covariance {violations}/{samples} violations"));

    // dispersed timing is the extreme history in the predicted direction
    let mut violations = 0;
    let mut configs = 0;
    for (gs, ss) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        for j in 1..=5 {
            for years in [1.0, 4.0, 8.0] {
                configs += 1;
                let g = gs * rng.gen_range(0.2..1.5);
                let sr = if ss > 0.0 { rng.gen_range(1.1..2.0) } else { rng.gen_range(0.5..0.9) };
                let p = bare(SubmodelKind::Renewal, g, rng.gen_range(0.2..2.0), sr);
                let z = CovariateProfile::default();
                let t = years * DAYS_PER_YEAR;
                let risk = |h: &HospitalizationHistory| -> Result<f64> {
                    Ok(risk_of_death(&p, &z, h, HAZARD_RATIO_WINDOW, &spec())?.probability)
                };
                let disp = risk(&dispersed_times(j, t)?)?;
                let maximizes = (g > 0.0) == (sr > 1.0);
                let mut others = vec![concentrated_times(j, t)?];
                for _ in 0..100 {
                    others.push(random_history(&mut rng, j, t)?);
                }
                for h in &others {
                    let r = risk(h)?;
                    let slack = 1e-9 * disp;
                    if (maximizes && disp < r - slack) || (!maximizes && disp > r + slack) {
                        violations += 1;
                    }
                }
            }
        }
    }
    pass &= violations == 0;
    notes.push(format!("timing extremes {violations} violations over {configs} configurations × 101 histories"));
    Ok(Verdict::new(pass, notes.join("; ")))
}

/// `ln E[u^A e^{-B u}]` for a gamma frailty of variance `theta`.
fn gamma_transform(a: f64, b: f64, theta: f64) -> f64 {
    let k = 1.0 / theta;
    ln_gamma(k + a) - ln_gamma(k) + a * theta.ln() - (k + a) * (theta * b).ln_1p()
}

struct Terms {
    constant: f64,
    events: f64,
    death_load: f64,
    recurrent_load: f64,
}

fn conditional_terms(p: &ModelParams, r: &PatientRecord) -> Result<Terms> {
    let cd = p.death_coefficients.iter().map(|(k, b)| b * r.covariates[k]).sum::<f64>().exp();
    let cr = p.recurrent_coefficients.iter().map(|(k, b)| b * r.covariates[k]).sum::<f64>().exp();
    let j = r.event_count() as f64;
    let mut constant = j * cr.ln() + log_hazard_at_events(p.submodel, &p.recurrent_baseline, &r.history)?;
    if r.death_observed {
        constant += (cd * p.death_baseline.hazard(r.follow_up)?).ln();
    }
    Ok(Terms {
        constant,
        events: j,
        death_load: cd * p.death_baseline.cumulative_hazard(r.follow_up)?,
        recurrent_load: cr * cumulative_hazard_given_history(p.submodel, &p.recurrent_baseline, &r.history)?,
    })
}

fn likelihood_oracles() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..200 {
        let kind = if rng.gen_bool(0.5) { SubmodelKind::Renewal } else { SubmodelKind::Poisson };
        let mut p = bare(kind, 1.0, rng.gen_range(0.1..3.0), rng.gen_range(0.5..2.0));
        p.death_baseline = WeibullParams::new(rng.gen_range(0.6..2.5), rng.gen_range(500.0..6000.0))?;
        p.death_coefficients.insert("x".into(), rng.gen_range(-1.0..1.0));
        p.recurrent_coefficients.insert("x".into(), rng.gen_range(-1.0..1.0));
        let t = rng.gen_range(50.0..3000.0);
        let count = rng.gen_range(0..6);
        let h = random_history(&mut rng, count, t)?;
        let cov = BTreeMap::from([("x".to_string(), rng.gen_range(-2.0..2.0))]);
        let rec = PatientRecord::new("p", t, rng.gen_bool(0.5), h.times().to_vec(), cov)?;
        let delta = f64::from(u8::from(rec.death_observed));

        // γ = 1: one gamma transform over both loads
        let tm = conditional_terms(&p, &rec)?;
        let exact =
            tm.constant + gamma_transform(tm.events + delta, tm.death_load + tm.recurrent_load, p.frailty.variance);
        worst = worst.max((patient_log_likelihood(&rec, &p, &spec())? - exact).abs());

        // γ = 0: the death factor separates
        p.frailty_exponent = 0.0;
        let tm = conditional_terms(&p, &rec)?;
        let exact = tm.constant - tm.death_load + gamma_transform(tm.events, tm.recurrent_load, p.frailty.variance);
        worst = worst.max((patient_log_likelihood(&rec, &p, &spec())? - exact).abs());

        // θ → 0: frailty fixed at one
        p.frailty_exponent = rng.gen_range(-1.5..1.5);
        p.frailty.variance = 1e-11;
        let tm = conditional_terms(&p, &rec)?;
        let exact = tm.constant - tm.death_load - tm.recurrent_load;
        worst = worst.max((patient_log_likelihood(&rec, &p, &spec())? - exact).abs());
        cases += 3;
    }

    // frailty-averaged conditional likelihood over 10^6 draws
    let mut p = bare(SubmodelKind::Renewal, 0.6, 0.8, 0.8);
    p.death_baseline = WeibullParams::new(1.3, 800.0)?;
    p.recurrent_baseline = WeibullParams::new(0.8, 400.0)?;
    let rec = PatientRecord::new("mc", 600.0, true, vec![50.0, 200.0, 210.0], BTreeMap::new())?;
    let tm = conditional_terms(&p, &rec)?;
    let draws = 1_000_000;
    let mut mc = ChaCha8Rng::seed_from_u64(2);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let u = sample_frailty(p.frailty.variance, &mut mc)?;
        let g = p.frailty_exponent;
        let l = ((tm.events + g) * u.ln() - tm.death_load * u.powf(g) - tm.recurrent_load * u).exp();
        sum += l;
        sum_sq += l * l;
    }
    let n = draws as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean) / n).sqrt();
    let quad = (patient_log_likelihood(&rec, &p, &spec())? - tm.constant).exp();
    let z = (quad - mean) / se;
    Ok(Verdict::new(
        worst <= 1e-8 && z.abs() <= 3.0,
        format!("closed forms: max |Δ| = {worst:.2e} over {cases} cases; Monte Carlo z = {z:.2}"),
    ))
}

fn simulate_then_fit() -> Result<Verdict> {
    let truth = ModelParams {
        submodel: SubmodelKind::Renewal,
        frailty_exponent: 0.7,
        frailty: FrailtyParams { variance: 1.3 },
        death_baseline: WeibullParams { shape: 1.7, scale: 3000.0 },
        recurrent_baseline: WeibullParams { shape: 0.85, scale: 2000.0 },
        death_coefficients: BTreeMap::from([("z1".into(), 0.5), ("z2".into(), -0.4)]),
        recurrent_coefficients: BTreeMap::from([("z1".into(), 0.3), ("z2".into(), 0.4)]),
    };
    let config = |n: usize, seed: u64| SimulationConfig {
        n_patients: n,
        params: truth.clone(),
        covariates: BTreeMap::from([
            ("z1".into(), CovariateDistribution::Normal { mean: 0.0, sd: 1.0 }),
            ("z2".into(), CovariateDistribution::Bernoulli { p: 0.5 }),
        ]),
        admin_censoring: 5.0 * DAYS_PER_YEAR,
        seed,
    };
    let names = ["z1".to_string(), "z2".to_string()];
    let truth_values = |names: &[String]| -> Vec<f64> {
        names
            .iter()
            .map(|n| match n.as_str() {
                "death.z1" => 0.5,
                "death.z2" => -0.4,
                "recurrent.z1" => 0.3,
                "recurrent.z2" => 0.4,
                "frailty_exponent" => 0.7,
                "frailty_variance" => 1.3,
                "death_shape" => 1.7,
                "death_scale" => 3000.0,
                "recurrent_shape" => 0.85,
                "recurrent_scale" => 2000.0,
                other => panic!("unexpected parameter {other}"),
            })
            .collect()
    };

    let cohort = simulate_cohort(&config(2000, 20_240))?;
    let init = default_init(&cohort, SubmodelKind::Renewal, &names, &names);
    let big = fit(&cohort, SubmodelKind::Renewal, &init, &FitOptions::default())?;
    let truths = truth_values(&big.parameter_names);
    let outside: Vec<String> = big
        .ci95
        .iter()
        .zip(&truths)
        .filter(|(ci, t)| (ci.estimate - **t).abs() > 3.0 * ci.se)
        .map(|(ci, t)| format!("{} {:.4} vs {t} (se {:.4})", ci.name, ci.estimate, ci.se))
        .collect();
    let mut pass = big.converged && outside.is_empty();
    let mut detail = format!(
        "n=2000: converged {}, {} estimates beyond 3 SE{}",
        big.converged,
        outside.len(),
        if outside.is_empty() { String::new() } else { format!(" ({})", outside.join(", ")) }
    );

    let replicates = 100;
    let options = FitOptions { simplex_evaluations: 0, ..FitOptions::default() };
    let mut hits = vec![0usize; truths.len()];
    let mut failures = 0;
    for r in 0..replicates {
        let cohort = simulate_cohort(&config(500, 1_000 + r as u64))?;
        match fit(&cohort, SubmodelKind::Renewal, &truth, &options) {
            Ok(res) if res.converged => {
                for (i, (ci, t)) in res.ci95.iter().zip(&truths).enumerate() {
                    if ci.lower <= *t && *t <= ci.upper {
                        hits[i] += 1;
                    }
                }
            }
            _ => failures += 1,
        }
    }
    let rates: Vec<String> =
        big.parameter_names.iter().zip(&hits).map(|(n, h)| format!("{n} {}%", 100 * h / replicates)).collect();
    let in_band = hits.iter().all(|&h| (88..=99).contains(&(100 * h / replicates)));
    pass &= in_band;
    detail.push_str(&format!(
        "; coverage over {replicates} replicates at n=500 ({failures} failed fits): {}",
        rates.join(", ")
    ));
    Ok(Verdict::new(pass, detail))
}

fn degenerate_invariants() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let renewal = reference(SubmodelKind::Renewal)?;
    let z = CovariateProfile::reference(&renewal);
    let mut notes = Vec::new();

    let mut zero_window = true;
    for j in 0..5 {
        let h = dispersed_times(j.max(1), rng.gen_range(100.0..3000.0))?;
        zero_window &= risk_of_death(&renewal, &z, &h, 0.0, &spec())?.probability == 0.0;
    }
    notes.push(format!("w=0 → 0: {zero_window}"));

    let mut flat = renewal.clone();
    flat.frailty_exponent = 0.0;
    let mut worst_flat: f64 = 0.0;
    for _ in 0..200 {
        let t = rng.gen_range(100.0..3000.0);
        let w = rng.gen_range(1.0..2000.0);
        let count = rng.gen_range(1..8);
        let h = random_history(&mut rng, count, t)?;
        let a = risk_of_death(&flat, &z, &h, w, &spec())?.probability;
        let b = risk_of_death(&flat, &z, &HospitalizationHistory::empty(t)?, w, &spec())?.probability;
        worst_flat = worst_flat.max((a - b).abs());
    }
    notes.push(format!("γ=0 history effect {worst_flat:.1e}"));

    let mut worst_unit: f64 = 0.0;
    for _ in 0..200 {
        let g = rng.gen_range(-1.5..1.5);
        let theta = rng.gen_range(0.1..3.0);
        let r = bare(SubmodelKind::Renewal, g, theta, 1.0);
        let p = bare(SubmodelKind::Poisson, g, theta, 1.0);
        let t = rng.gen_range(100.0..3000.0);
        let w = rng.gen_range(1.0..2000.0);
        let count = rng.gen_range(0..8);
        let h = random_history(&mut rng, count, t)?;
        let zz = CovariateProfile::default();
        let a = risk_of_death(&r, &zz, &h, w, &spec())?.probability;
        let b = risk_of_death(&p, &zz, &h, w, &spec())?.probability;
        worst_unit = worst_unit.max((a - b).abs());
    }
    notes.push(format!("σ_r=1 renewal vs Poisson {worst_unit:.1e}"));

    let fixed = QuadratureSpec::default().with_scheme(Scheme::Trapezoid);
    let adaptive = QuadratureSpec::default().with_scheme(Scheme::Adaptive);
    let mut worst_rel: f64 = 0.0;
    for _ in 0..300 {
        let kind = if rng.gen_bool(0.5) { SubmodelKind::Renewal } else { SubmodelKind::Poisson };
        let p = bare(kind, rng.gen_range(-2.0..2.0), rng.gen_range(0.02..4.0), rng.gen_range(0.4..2.5));
        let t = rng.gen_range(30.0..3650.0);
        let count = rng.gen_range(0..12);
        let h = random_history(&mut rng, count, t)?;
        let w = rng.gen_range(1.0..3650.0);
        let zz = CovariateProfile::default();
        let a = risk_of_death(&p, &zz, &h, w, &fixed)?;
        let b = risk_of_death(&p, &zz, &h, w, &adaptive)?;
        for (x, y) in [(a.numerator, b.numerator), (a.denominator, b.denominator)] {
            worst_rel = worst_rel.max((x - y).abs() / y.abs());
        }
    }
    notes.push(format!("fixed-node vs adaptive {worst_rel:.1e} relative"));

    Ok(Verdict::new(zero_window && worst_flat <= 1e-12 && worst_unit <= 1e-10 && worst_rel <= 1e-8, notes.join("; ")))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("worked cumulative-hazard example", worked_cumulative_hazard),
        ("Poisson hazard-ratio table (±1%)", poisson_hr_table),
        ("renewal hazard-ratio table (±2%)", renewal_hr_table),
        ("concentrated vs dispersed table (±0.005)", timing_hr_table),
        ("renewal curve point at T+w = 5y (±0.01)", curve_point),
        ("Wald test machinery", wald_machinery),
        ("structural property suites", structural_properties),
        ("likelihood oracles", likelihood_oracles),
        ("simulate-then-fit recovery and coverage", simulate_then_fit),
        ("degenerate and consistency invariants", degenerate_invariants),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let verdict = check().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        println!("{} {name} [{secs:.1}s]: {}", if verdict.pass { "PASS" } else { "FAIL" }, verdict.detail);
        failed += usize::from(!verdict.pass);
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
