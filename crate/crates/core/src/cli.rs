//! Command-line front end. Times on the command line are in years and are
//! converted to days at [`DAYS_PER_YEAR`]; files store days.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::fit::{default_init, fit};
use crate::hazards::DAYS_PER_YEAR;
use crate::io::{
    load_cohort, load_fit_result, load_params, load_run_config, load_simulation_config, save_cohort, save_fit_result,
    save_table, write_table, RunConfig, Table,
};
use crate::predict::{
    concentrated_times, dispersed_times, hazard_ratio, prediction_curve, risk_of_death, unconditional_risk,
    CovariateProfile, ModelParams, HAZARD_RATIO_WINDOW,
};
use crate::quadrature::{QuadratureSpec, Scheme};
use crate::recurrent::{HospitalizationHistory, SubmodelKind};
use crate::simulate::simulate_cohort;
use crate::wald::{wald_distribution_test, wald_from_fit, WaldReport};

/// Overrides the default quadrature node count.
pub const QUAD_NODES_ENV: &str = "JOINTFRAIL_QUAD_NODES";

#[derive(Debug, Parser)]
#[command(name = "jointfrail", version, about = "Joint frailty model for hospitalizations and death")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a cohort from a simulation config.
    Simulate(SimulateArgs),
    /// Fit the model to a cohort by maximum likelihood.
    Fit(FitArgs),
    /// Risk of death in (T, T+w] for one history.
    Predict(PredictArgs),
    /// Risk of death over a grid of windows.
    Curve(CurveArgs),
    /// Hazard-ratio table over numbers of hospitalizations and follow-up times.
    Hr(HrArgs),
    /// Wald test of whether hospitalization timing matters.
    TestDistribution(TestArgs),
}

#[derive(Debug, Args)]
struct QuadArgs {
    /// Quadrature nodes [default: 64, or $JOINTFRAIL_QUAD_NODES].
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    rel_tol: Option<f64>,
}

impl QuadArgs {
    fn resolve(&self, base: QuadratureSpec) -> Result<QuadratureSpec> {
        let nodes = match (self.nodes, std::env::var(QUAD_NODES_ENV)) {
            (Some(n), _) => n,
            (None, Ok(text)) => text
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{QUAD_NODES_ENV} must be a positive integer, got '{text}'")))?,
            (None, Err(_)) => base.node_count,
        };
        QuadratureSpec::new(nodes, self.scheme.unwrap_or(base.scheme), self.rel_tol.unwrap_or(base.rel_tol))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Timing {
    Dispersed,
    Concentrated,
}

impl Timing {
    fn history(self, events: usize, horizon: f64) -> Result<HospitalizationHistory> {
        match (self, events) {
            (_, 0) => HospitalizationHistory::empty(horizon),
            (Self::Dispersed, j) => dispersed_times(j, horizon),
            (Self::Concentrated, j) => concentrated_times(j, horizon),
        }
    }
}

impl Display for Timing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dispersed => "dispersed",
            Self::Concentrated => "concentrated",
        })
    }
}

#[derive(Debug, Args)]
struct PatientArgs {
    /// Model parameter file, or a fit result file.
    #[arg(long)]
    params: PathBuf,
    /// Follow-up time T, years.
    #[arg(long = "T")]
    horizon: f64,
    /// Number of hospitalizations before T, placed by --timing.
    #[arg(long, default_value_t = 0, conflicts_with = "times")]
    events: usize,
    #[arg(long, value_enum, default_value_t = Timing::Dispersed)]
    timing: Timing,
    /// Explicit hospitalization times, years.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    /// Covariate deviation from the reference patient, as name=value.
    #[arg(long = "covariate", value_parser = parse_assignment)]
    covariates: Vec<(String, f64)>,
    /// Marginal risk, ignoring hospitalizations.
    #[arg(long)]
    unconditional: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    patients: PathBuf,
    #[arg(long)]
    hospitalizations: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Run config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    patients: Option<PathBuf>,
    #[arg(long)]
    hospitalizations: Option<PathBuf>,
    #[arg(long)]
    submodel: Option<SubmodelKind>,
    /// Death covariates [default: every covariate column].
    #[arg(long, value_delimiter = ',')]
    death_covariates: Option<Vec<String>>,
    /// Hospitalization covariates [default: every covariate column].
    #[arg(long, value_delimiter = ',')]
    recurrent_covariates: Option<Vec<String>>,
    /// Starting values [default: neutral start].
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    patient: PatientArgs,
    /// Prediction window w, years.
    #[arg(long)]
    w: f64,
}

#[derive(Debug, Args)]
struct CurveArgs {
    #[command(flatten)]
    patient: PatientArgs,
    /// Largest window, years.
    #[arg(long)]
    w_max: f64,
    /// Grid points from w = 0 to w_max.
    #[arg(long, default_value_t = 61)]
    points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HrMode {
    /// J hospitalizations against none.
    Count,
    /// J concentrated against J dispersed hospitalizations.
    Timing,
}

#[derive(Debug, Args)]
struct HrArgs {
    #[arg(long)]
    params: PathBuf,
    /// Asserted against the parameter file when given.
    #[arg(long)]
    submodel: Option<SubmodelKind>,
    /// Hospitalization counts, as a list or range, e.g. 1..5.
    #[arg(long = "J", value_parser = parse_counts)]
    counts: Counts,
    /// Follow-up times, years.
    #[arg(long = "T", value_delimiter = ',', required = true)]
    horizons: Vec<f64>,
    #[arg(long, value_enum, default_value_t = HrMode::Count)]
    mode: HrMode,
    #[arg(long, value_enum, default_value_t = Timing::Dispersed)]
    timing: Timing,
    /// Window, days.
    #[arg(long, default_value_t = HAZARD_RATIO_WINDOW)]
    window_days: f64,
    #[arg(long = "covariate", value_parser = parse_assignment)]
    covariates: Vec<(String, f64)>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Debug, Args)]
struct TestArgs {
    /// Fit result or parameter file.
    #[arg(long)]
    params: PathBuf,
    /// Standard error of γ; replaces the file's covariance.
    #[arg(long)]
    se_exponent: Option<f64>,
    /// Standard error of the recurrent shape.
    #[arg(long)]
    se_shape: Option<f64>,
    /// Covariance of γ and the recurrent shape.
    #[arg(long, default_value_t = 0.0)]
    cov: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct Counts(Vec<usize>);

fn parse_counts(text: &str) -> std::result::Result<Counts, String> {
    let bad = || format!("expected a list like 1,2,3 or a range like 1..5, got '{text}'");
    if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok(Counts((a..=b).collect()));
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<std::result::Result<_, _>>().map(Counts)
}

fn parse_assignment(text: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = text.split_once('=').ok_or_else(|| format!("expected name=value, got '{text}'"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("'{v}' is not a number"))?;
    Ok((k.trim().to_string(), v))
}

fn years_to_days(name: &str, years: f64) -> Result<f64> {
    if !years.is_finite() || years < 0.0 {
        return Err(Error::Usage(format!("{name} must be a finite number of years >= 0, got {years}")));
    }
    Ok(years * DAYS_PER_YEAR)
}

fn profile(params: &ModelParams, assignments: &[(String, f64)]) -> Result<CovariateProfile> {
    let mut p = CovariateProfile::reference(params);
    for (name, value) in assignments {
        if !p.values.contains_key(name) {
            return Err(Error::Usage(format!("model has no covariate '{name}'")));
        }
        p.values.insert(name.clone(), *value);
    }
    Ok(p)
}

fn quadrature_metadata(spec: &QuadratureSpec, meta: &mut BTreeMap<String, String>) {
    meta.insert("quadrature_scheme".into(), spec.scheme.to_string());
    meta.insert("quadrature_nodes".into(), spec.node_count.to_string());
    meta.insert("quadrature_rel_tol".into(), format!("{:e}", spec.rel_tol));
    meta.insert("days_per_year".into(), DAYS_PER_YEAR.to_string());
}

fn emit_table(table: &Table, output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => save_table(table, path),
        None => write_table(table, std::io::stdout().lock()),
    }
}

fn join<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

struct Prepared {
    params: ModelParams,
    profile: CovariateProfile,
    history: HospitalizationHistory,
    spec: QuadratureSpec,
    metadata: BTreeMap<String, String>,
}

fn prepare(args: &PatientArgs) -> Result<Prepared> {
    let params = load_params(&args.params)?;
    let profile = profile(&params, &args.covariates)?;
    let horizon = years_to_days("--T", args.horizon)?;
    let (history, timing) = match &args.times {
        Some(years) => {
            let days = years.iter().map(|&y| years_to_days("--times", y)).collect::<Result<Vec<_>>>()?;
            (HospitalizationHistory::new(horizon, days)?, "explicit".to_string())
        }
        None => (args.timing.history(args.events, horizon)?, args.timing.to_string()),
    };
    let spec = args.quad.resolve(QuadratureSpec::default())?;
    let mut metadata = BTreeMap::new();
    metadata.insert("submodel".into(), params.submodel.to_string());
    metadata.insert("timing".into(), if args.unconditional { "unconditional".into() } else { timing });
    metadata.insert("horizon_days".into(), horizon.to_string());
    metadata.insert("events".into(), history.count().to_string());
    metadata.insert("event_days".into(), join(history.times()));
    metadata.insert("covariates".into(), join(profile.values.iter().map(|(k, v)| format!("{k}={v}"))));
    quadrature_metadata(&spec, &mut metadata);
    Ok(Prepared { params, profile, history, spec, metadata })
}

fn curve_table(prep: Prepared, windows: &[f64], unconditional: bool) -> Result<Table> {
    let horizon = prep.history.horizon();
    let points = if unconditional {
        windows
            .iter()
            .map(|&w| {
                Ok((horizon + w, unconditional_risk(&prep.params, &prep.profile, horizon, w, &prep.spec)?.probability))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        prediction_curve(&prep.params, &prep.profile, &prep.history, windows, &prep.spec)?
            .into_iter()
            .map(|p| (p.time, p.probability))
            .collect()
    };
    Ok(Table {
        metadata: prep.metadata,
        header: vec!["time_years".into(), "time_days".into(), "probability".into()],
        rows: points.into_iter().map(|(t, p)| vec![t / DAYS_PER_YEAR, t, p]).collect(),
    })
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let w = years_to_days("--w", args.w)?;
    let prep = prepare(&args.patient)?;
    let table = if args.patient.unconditional {
        curve_table(prep, &[w], true)?
    } else {
        let r = risk_of_death(&prep.params, &prep.profile, &prep.history, w, &prep.spec)?;
        let t = prep.history.horizon() + w;
        Table {
            metadata: prep.metadata,
            header: vec!["time_years".into(), "time_days".into(), "probability".into()],
            rows: vec![vec![t / DAYS_PER_YEAR, t, r.probability]],
        }
    };
    emit_table(&table, args.patient.output.as_deref())
}

fn run_curve(args: &CurveArgs) -> Result<()> {
    let w_max = years_to_days("--w-max", args.w_max)?;
    if args.points < 2 {
        return Err(Error::Usage("--points must be >= 2".into()));
    }
    let windows: Vec<f64> = (0..args.points).map(|i| w_max * i as f64 / (args.points - 1) as f64).collect();
    let prep = prepare(&args.patient)?;
    let table = curve_table(prep, &windows, args.patient.unconditional)?;
    emit_table(&table, args.patient.output.as_deref())
}

fn run_hr(args: &HrArgs) -> Result<()> {
    let params = load_params(&args.params)?;
    if let Some(kind) = args.submodel {
        if kind != params.submodel {
            return Err(Error::Usage(format!(
                "--submodel {kind} does not match the parameter file ({})",
                params.submodel
            )));
        }
    }
    let profile = profile(&params, &args.covariates)?;
    let spec = args.quad.resolve(QuadratureSpec::default())?;
    let horizons = args.horizons.iter().map(|&y| years_to_days("--T", y)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(args.counts.0.len());
    for &j in &args.counts.0 {
        let mut row = vec![j as f64];
        for &t in &horizons {
            let (num, den) = match args.mode {
                HrMode::Count => (args.timing.history(j, t)?, HospitalizationHistory::empty(t)?),
                HrMode::Timing => (Timing::Concentrated.history(j, t)?, Timing::Dispersed.history(j, t)?),
            };
            row.push(hazard_ratio(&params, &profile, &num, &den, args.window_days, &spec)?);
        }
        rows.push(row);
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("submodel".into(), params.submodel.to_string());
    metadata.insert(
        "comparison".into(),
        match args.mode {
            HrMode::Count => format!("J {} hospitalizations vs none", args.timing),
            HrMode::Timing => "J concentrated vs J dispersed hospitalizations".into(),
        },
    );
    metadata.insert("window_days".into(), args.window_days.to_string());
    metadata.insert("columns".into(), "T in years".into());
    quadrature_metadata(&spec, &mut metadata);
    let mut header = vec!["J".to_string()];
    header.extend(args.horizons.iter().map(|t| t.to_string()));
    emit_table(&Table { metadata, header, rows }, args.output.as_deref())
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let mut config = load_simulation_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n {
        config.n_patients = n;
    }
    let cohort = simulate_cohort(&config)?;
    save_cohort(&cohort, &args.patients, &args.hospitalizations)?;
    println!(
        "simulated {} patients: {} deaths, {} hospitalizations (seed {})",
        cohort.len(),
        cohort.death_count(),
        cohort.event_count(),
        config.seed
    );
    Ok(())
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let config = args.config.as_deref().map(load_run_config).transpose()?;
    let pick = |flag: &Option<PathBuf>, from: Option<&PathBuf>, name: &str| -> Result<PathBuf> {
        flag.clone()
            .or_else(|| from.cloned())
            .ok_or_else(|| Error::Usage(format!("--{name} is required (flag or run config)")))
    };
    let patients = pick(&args.patients, config.as_ref().and_then(|c| c.patients.as_ref()), "patients")?;
    let hospitalizations =
        pick(&args.hospitalizations, config.as_ref().and_then(|c| c.hospitalizations.as_ref()), "hospitalizations")?;
    let output = pick(&args.output, config.as_ref().and_then(|c| c.output.as_ref()), "output")?;
    let cohort = load_cohort(&patients, &hospitalizations)?;

    let columns: Vec<String> = cohort.patients()[0].covariates.keys().cloned().collect();
    let submodel = args
        .submodel
        .or(config.as_ref().map(|c| c.submodel))
        .ok_or_else(|| Error::Usage("--submodel is required (flag or run config)".into()))?;
    let schema = |flag: &Option<Vec<String>>, from: Option<&Vec<String>>| -> Vec<String> {
        let chosen =
            flag.clone().or_else(|| from.filter(|v| !v.is_empty()).cloned()).unwrap_or_else(|| columns.clone());
        chosen.into_iter().filter(|n| !n.is_empty()).collect()
    };
    let run = RunConfig {
        submodel,
        death_covariates: schema(&args.death_covariates, config.as_ref().map(|c| &c.death_covariates)),
        recurrent_covariates: schema(&args.recurrent_covariates, config.as_ref().map(|c| &c.recurrent_covariates)),
        quadrature: None,
        optimizer: config.as_ref().and_then(|c| c.optimizer),
        patients: Some(patients),
        hospitalizations: Some(hospitalizations),
        output: Some(output.clone()),
        seed: config.as_ref().and_then(|c| c.seed),
    };
    run.validate_against(&cohort)?;

    let mut options = run.optimizer.unwrap_or_default();
    let base = config.as_ref().and_then(|c| c.quadrature).unwrap_or(options.quadrature);
    options.quadrature = args.quad.resolve(base)?;
    if let Some(m) = args.max_iterations {
        options.max_iterations = m;
    }
    let init = match &args.init {
        Some(path) => load_params(path)?,
        None => default_init(&cohort, submodel, &run.death_covariates, &run.recurrent_covariates),
    };
    let result = fit(&cohort, submodel, &init, &options)?;
    save_fit_result(&result, &output)?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "loglik {:.6} (start {:.6}); converged {}; {} iterations; gradient {:.2e}",
        result.loglik, result.initial_loglik, result.converged, result.iterations, result.gradient_max_norm
    )?;
    for ci in &result.ci95 {
        writeln!(out, "{:<28} {:>14.6} ({:.6}, {:.6})", ci.name, ci.estimate, ci.lower, ci.upper)?;
    }
    Ok(())
}

fn run_test(args: &TestArgs) -> Result<WaldReport> {
    let explicit = match (args.se_exponent, args.se_shape) {
        (Some(a), Some(b)) => Some([[a * a, args.cov], [args.cov, b * b]]),
        (None, None) => None,
        _ => return Err(Error::Usage("--se-exponent and --se-shape go together".into())),
    };
    if explicit.is_none() {
        if let Ok(result) = load_fit_result(&args.params) {
            return wald_from_fit(&result);
        }
    }
    let params = load_params(&args.params)?;
    wald_distribution_test(params.frailty_exponent, params.recurrent_baseline.shape, explicit.unwrap_or([[0.0; 2]; 2]))
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Predict(a) => run_predict(a),
        Command::Curve(a) => run_curve(a),
        Command::Hr(a) => run_hr(a),
        Command::TestDistribution(a) => {
            let report = run_test(a)?;
            let text = toml::to_string(&report).map_err(|e| Error::Toml(e.to_string()))?;
            match &a.output {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

/// Runs the program on `argv` (program name first); returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e @ Error::Usage(_)) => {
            eprintln!("usage error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
