//! Cohort CSV files, parameter and configuration TOML files, and the
//! prediction outputs written by the command line.
//!
//! Cohorts are stored in long format:
//!
//! * patients: `patient_id,follow_up_days,death_observed,<covariate>...`
//! * hospitalizations: `patient_id,event_day`
//!
//! Rows are numbered as file lines, so the header is line 1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{FitOptions, FitResult};
use crate::likelihood::{Cohort, PatientRecord};
use crate::predict::ModelParams;
use crate::quadrature::QuadratureSpec;
use crate::recurrent::SubmodelKind;
use crate::simulate::SimulationConfig;

pub const PATIENT_ID: &str = "patient_id";
pub const FOLLOW_UP_DAYS: &str = "follow_up_days";
pub const DEATH_OBSERVED: &str = "death_observed";
pub const EVENT_DAY: &str = "event_day";

struct PatientRow {
    line: u64,
    id: String,
    follow_up: f64,
    death_observed: bool,
    covariates: BTreeMap<String, f64>,
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn column(headers: &csv::StringRecord, name: &str, file: &str, problems: &mut Vec<String>) -> Option<usize> {
    let found = headers.iter().position(|h| h.trim() == name);
    if found.is_none() {
        problems.push(format!("{file}: missing column '{name}'"));
    }
    found
}

fn parse_real(text: &str) -> Option<f64> {
    text.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_flag(text: &str) -> Option<bool> {
    match text.trim() {
        "1" | "true" | "TRUE" | "True" => Some(true),
        "0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

/// Reads and validates a cohort, collecting every row-level problem.
pub fn read_cohort<P: Read, H: Read>(patients: P, hospitalizations: H) -> Result<Cohort> {
    let mut problems = Vec::new();

    let mut pr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(patients);
    let headers = pr.headers()?.clone();
    let id_col = column(&headers, PATIENT_ID, "patients", &mut problems);
    let fu_col = column(&headers, FOLLOW_UP_DAYS, "patients", &mut problems);
    let death_col = column(&headers, DEATH_OBSERVED, "patients", &mut problems);
    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| ![PATIENT_ID, FOLLOW_UP_DAYS, DEATH_OBSERVED].contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let (Some(id_col), Some(fu_col), Some(death_col)) = (id_col, fu_col, death_col) else {
        return Err(Error::Validation(problems));
    };

    let mut rows: Vec<PatientRow> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for record in pr.records() {
        let record = record?;
        let line = line_of(&record);
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            problems.push(format!("patients line {line}: empty {PATIENT_ID}"));
            continue;
        }
        let follow_up = parse_real(record.get(fu_col).unwrap_or(""));
        let death = parse_flag(record.get(death_col).unwrap_or(""));
        let mut covariates = BTreeMap::new();
        for (i, name) in &covariate_cols {
            match parse_real(record.get(*i).unwrap_or("")) {
                Some(v) => {
                    covariates.insert(name.clone(), v);
                }
                None => problems.push(format!("patients line {line}: '{name}' is not a finite number")),
            }
        }
        match (follow_up, death) {
            (Some(f), Some(d)) if f > 0.0 => {
                if by_id.insert(id.clone(), rows.len()).is_some() {
                    problems.push(format!("patients line {line}: duplicate {PATIENT_ID} '{id}'"));
                    continue;
                }
                rows.push(PatientRow { line, id, follow_up: f, death_observed: d, covariates });
            }
            (f, d) => {
                if f.is_none_or(|f| f <= 0.0) {
                    problems.push(format!("patients line {line}: {FOLLOW_UP_DAYS} must be a number > 0"));
                }
                if d.is_none() {
                    problems.push(format!("patients line {line}: {DEATH_OBSERVED} must be 0 or 1"));
                }
            }
        }
    }

    let mut hr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(hospitalizations);
    let hheaders = hr.headers()?.clone();
    let hid_col = column(&hheaders, PATIENT_ID, "hospitalizations", &mut problems);
    let day_col = column(&hheaders, EVENT_DAY, "hospitalizations", &mut problems);
    let (Some(hid_col), Some(day_col)) = (hid_col, day_col) else {
        return Err(Error::Validation(problems));
    };
    let mut events: Vec<Vec<(f64, u64)>> = vec![Vec::new(); rows.len()];
    for record in hr.records() {
        let record = record?;
        let line = line_of(&record);
        let id = record.get(hid_col).unwrap_or("");
        let Some(&idx) = by_id.get(id) else {
            problems.push(format!("hospitalizations line {line}: unknown {PATIENT_ID} '{id}'"));
            continue;
        };
        let Some(day) = parse_real(record.get(day_col).unwrap_or("")) else {
            problems.push(format!("hospitalizations line {line}: {EVENT_DAY} is not a finite number"));
            continue;
        };
        let follow_up = rows[idx].follow_up;
        if !(day > 0.0 && day < follow_up) {
            problems.push(format!(
                "hospitalizations line {line}: {EVENT_DAY} {day} must lie strictly inside (0, {follow_up}) for patient '{id}'"
            ));
            continue;
        }
        events[idx].push((day, line));
    }
    for (row, evs) in rows.iter().zip(events.iter_mut()) {
        evs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in evs.windows(2) {
            if pair[0].0 == pair[1].0 {
                problems.push(format!(
                    "hospitalizations line {}: repeated {EVENT_DAY} {} for patient '{}' (also line {})",
                    pair[1].1, pair[1].0, row.id, pair[0].1
                ));
            }
        }
    }

    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let mut records = Vec::with_capacity(rows.len());
    for (row, evs) in rows.into_iter().zip(events) {
        let times = evs.into_iter().map(|(d, _)| d).collect();
        let record = PatientRecord::new(row.id, row.follow_up, row.death_observed, times, row.covariates)
            .map_err(|e| Error::Validation(vec![format!("patients line {}: {e}", row.line)]))?;
        records.push(record);
    }
    Cohort::new(records).map_err(|e| Error::Validation(vec![e.to_string()]))
}

pub fn load_cohort(patients: &Path, hospitalizations: &Path) -> Result<Cohort> {
    read_cohort(fs::File::open(patients)?, fs::File::open(hospitalizations)?).map_err(|e| match e {
        Error::Validation(rows) => Error::Validation(
            rows.into_iter()
                .map(|r| {
                    let file = if r.starts_with("hospitalizations") { hospitalizations } else { patients };
                    format!("{}: {r}", file.display())
                })
                .collect(),
        ),
        other => other,
    })
}

/// Writes a cohort; values use shortest round-trip formatting.
pub fn write_cohort<P: Write, H: Write>(cohort: &Cohort, patients: P, hospitalizations: H) -> Result<()> {
    let names: BTreeSet<&String> = cohort.patients().iter().flat_map(|p| p.covariates.keys()).collect();
    let mut pw = csv::Writer::from_writer(patients);
    let mut header = vec![PATIENT_ID.to_string(), FOLLOW_UP_DAYS.to_string(), DEATH_OBSERVED.to_string()];
    header.extend(names.iter().map(|n| n.to_string()));
    pw.write_record(&header)?;
    for p in cohort.patients() {
        let mut row = vec![p.id.clone(), p.follow_up.to_string(), u8::from(p.death_observed).to_string()];
        for name in &names {
            let v = p
                .covariates
                .get(*name)
                .ok_or_else(|| Error::Parameter(format!("patient '{}' lacks covariate '{name}'", p.id)))?;
            row.push(v.to_string());
        }
        pw.write_record(&row)?;
    }
    pw.flush()?;

    let mut hw = csv::Writer::from_writer(hospitalizations);
    hw.write_record([PATIENT_ID, EVENT_DAY])?;
    for p in cohort.patients() {
        for t in p.history.times() {
            hw.write_record([p.id.as_str(), t.to_string().as_str()])?;
        }
    }
    hw.flush()?;
    Ok(())
}

pub fn save_cohort(cohort: &Cohort, patients: &Path, hospitalizations: &Path) -> Result<()> {
    for path in [patients, hospitalizations] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    write_cohort(cohort, fs::File::create(patients)?, fs::File::create(hospitalizations)?)
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
}

fn render_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Toml(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parses model parameters; a fit result file is accepted and its
/// `estimates` table used.
pub fn parse_params(text: &str) -> Result<ModelParams> {
    let value: toml::Table = parse_toml(text)?;
    let params: ModelParams = match value.get("estimates") {
        Some(estimates) => estimates.clone().try_into().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?,
        None => toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?,
    };
    params.validate()?;
    Ok(params)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    parse_params(&fs::read_to_string(path)?).map_err(|e| Error::Toml(format!("{}: {e}", path.display())))
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    write_text(path, &render_toml(params)?)
}

pub fn parse_fit_result(text: &str) -> Result<FitResult> {
    parse_toml(text)
}

pub fn load_fit_result(path: &Path) -> Result<FitResult> {
    parse_fit_result(&fs::read_to_string(path)?)
}

pub fn save_fit_result(result: &FitResult, path: &Path) -> Result<()> {
    write_text(path, &render_toml(result)?)
}

pub fn load_simulation_config(path: &Path) -> Result<SimulationConfig> {
    let config: SimulationConfig = parse_toml(&fs::read_to_string(path)?)?;
    config.validate()?;
    Ok(config)
}

/// Settings of a `fit` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub submodel: SubmodelKind,
    #[serde(default)]
    pub death_covariates: Vec<String>,
    #[serde(default)]
    pub recurrent_covariates: Vec<String>,
    pub quadrature: Option<QuadratureSpec>,
    pub optimizer: Option<FitOptions>,
    pub patients: Option<PathBuf>,
    pub hospitalizations: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Seed recorded with the run; fitting itself is deterministic.
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Every schema name must be a covariate column of the cohort.
    pub fn validate_against(&self, cohort: &Cohort) -> Result<()> {
        let columns: BTreeSet<&String> = cohort.patients().iter().flat_map(|p| p.covariates.keys()).collect();
        let missing: Vec<String> = self
            .death_covariates
            .iter()
            .chain(&self.recurrent_covariates)
            .filter(|n| !columns.contains(n))
            .map(|n| format!("covariate '{n}' is not a column of the patients table"))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(missing))
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_toml(&fs::read_to_string(path)?)
}

/// A delimited series preceded by `# key = value` metadata lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub metadata: BTreeMap<String, String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn write_table<W: Write>(table: &Table, mut out: W) -> Result<()> {
    for (k, v) in &table.metadata {
        writeln!(out, "# {k} = {v}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<R: Read>(mut input: R) -> Result<Table> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let metadata = text
        .lines()
        .filter_map(|l| l.strip_prefix('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let line = line_of(&record);
        let row = record
            .iter()
            .map(|c| {
                c.parse::<f64>().map_err(|_| Error::Validation(vec![format!("line {line}: '{c}' is not a number")]))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { metadata, header, rows })
}

pub fn save_table(table: &Table, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_table(table, &mut buf)?;
    write_text(path, std::str::from_utf8(&buf).expect("csv output is UTF-8"))
}

pub fn load_table(path: &Path) -> Result<Table> {
    read_table(fs::File::open(path)?)
}
