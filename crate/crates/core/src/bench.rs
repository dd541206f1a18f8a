//! Benchmark configuration and CSV output.
//!
//! A [`BenchConfig`] is read from a single TOML file. Every key is optional;
//! unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//! n_runs = 100
//! horizon = 30
//! dt = 1.0
//! sigma_cv = 1.0
//! meas_noise = [1.0, 1.0, 1.0]      # diagonal of R
//! sensor_grid = 3                   # n x n grid over [-extent, extent]^2
//! sensor_extent = 10.0
//! # sensors = [[0.0, 0.0], ...]     # explicit positions replace the grid
//! init_state = [0.0, 1.0, 0.0, 1.0]
//! init_cov_scale = 10.0
//! measurement = "range"             # or "linear"
//! mismatch_scales = [0.01, 0.05, 0.1, 0.5]
//! include_match = true
//! filters = ["ef_0.01", "ef_0.1", "ef_0.3", "ef_0.5", "ef_0.7", "ekf", "ukf", "pf", "enkf"]
//! output_dir = "bench_out"
//! write_paths = false
//! path_runs = 8
//!
//! [efkf]
//! samples = 256
//! iters = 100
//! step0 = 0.5
//! step_decay = 0.0
//! seed = 0
//! fixed_crn = false
//! standardized_draws = true
//!
//! [ukf]
//! spread = 0.5
//! beta = 2.0
//! # kappa defaults to 3 - d
//!
//! [pf]
//! particles = 2000
//!
//! [enkf]
//! members = 500
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::baselines::UkfParams;
use crate::energy::{AlphaConfig, FilterTrace};
use crate::error::FilterError;
use crate::gaussian::GaussianBelief;
use crate::tracking::{
    AssumedQ, BenchmarkResult, CvModel, FilterSpec, MeasurementKind, RunOutcome, Scenario, SensorField,
    DEFAULT_SENSOR_EXTENT, MISMATCH_SCALES, STATE_DIM,
};

pub const RMSE_TABLE_FILE: &str = "rmse_table.csv";
pub const ENERGY_TRACE_FILE: &str = "energy_trace.csv";

/// Failure of a CLI command, mapped to a process exit code.
#[derive(Debug)]
pub enum BenchError {
    /// Unreadable or invalid configuration (exit 2).
    Config(String),
    /// Every run of at least one cell failed (exit 3).
    AllRunsFailed(Vec<String>),
    /// Numerical or I/O failure (exit 1).
    Runtime(String),
}

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::AllRunsFailed(_) => 3,
            BenchError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::Config(m) => write!(f, "configuration error: {m}"),
            BenchError::AllRunsFailed(cells) => {
                write!(f, "every run failed in cell(s): {}", cells.join(", "))
            }
            BenchError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for BenchError {}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Runtime(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        BenchError::Runtime(format!("csv error: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementChoice {
    Range,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfkfSection {
    pub samples: usize,
    pub iters: usize,
    pub step0: f64,
    pub step_decay: f64,
    pub seed: u64,
    pub fixed_crn: bool,
    pub standardized_draws: bool,
}

impl Default for EfkfSection {
    fn default() -> Self {
        let a = AlphaConfig::default();
        Self {
            samples: 256,
            iters: a.iters,
            step0: a.step0,
            step_decay: a.step_decay,
            seed: a.seed,
            fixed_crn: a.fixed_crn,
            standardized_draws: a.standardized_draws,
        }
    }
}

impl EfkfSection {
    pub fn alpha_config(&self, alpha: f64) -> AlphaConfig {
        AlphaConfig {
            alpha,
            samples: self.samples,
            iters: self.iters,
            step0: self.step0,
            step_decay: self.step_decay,
            seed: self.seed,
            fixed_crn: self.fixed_crn,
            standardized_draws: self.standardized_draws,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UkfSection {
    pub spread: f64,
    pub beta: f64,
    pub kappa: Option<f64>,
}

impl Default for UkfSection {
    fn default() -> Self {
        let p = UkfParams::scaled(STATE_DIM);
        Self {
            spread: p.spread,
            beta: p.beta,
            kappa: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfSection {
    pub particles: usize,
}

impl Default for PfSection {
    fn default() -> Self {
        Self { particles: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnkfSection {
    pub members: usize,
}

impl Default for EnkfSection {
    fn default() -> Self {
        Self { members: 500 }
    }
}

/// Benchmark configuration file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub n_runs: usize,
    pub horizon: usize,
    pub dt: f64,
    pub sigma_cv: f64,
    pub meas_noise: [f64; 3],
    pub sensor_grid: usize,
    pub sensor_extent: f64,
    pub sensors: Option<Vec<[f64; 2]>>,
    pub init_state: [f64; 4],
    pub init_cov_scale: f64,
    pub measurement: MeasurementChoice,
    pub mismatch_scales: Vec<f64>,
    pub include_match: bool,
    pub filters: Vec<String>,
    pub output_dir: PathBuf,
    pub write_paths: bool,
    pub path_runs: usize,
    pub efkf: EfkfSection,
    pub ukf: UkfSection,
    pub pf: PfSection,
    pub enkf: EnkfSection,
}

pub const DEFAULT_FILTERS: [&str; 9] = [
    "ef_0.01", "ef_0.1", "ef_0.3", "ef_0.5", "ef_0.7", "ekf", "ukf", "pf", "enkf",
];

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_runs: 100,
            horizon: 30,
            dt: 1.0,
            sigma_cv: 1.0,
            meas_noise: [1.0; 3],
            sensor_grid: 3,
            sensor_extent: DEFAULT_SENSOR_EXTENT,
            sensors: None,
            init_state: [0.0, 1.0, 0.0, 1.0],
            init_cov_scale: 10.0,
            measurement: MeasurementChoice::Range,
            mismatch_scales: MISMATCH_SCALES.to_vec(),
            include_match: true,
            filters: DEFAULT_FILTERS.iter().map(|s| s.to_string()).collect(),
            output_dir: PathBuf::from("bench_out"),
            write_paths: false,
            path_runs: 8,
            efkf: EfkfSection::default(),
            ukf: UkfSection::default(),
            pf: PfSection::default(),
            enkf: EnkfSection::default(),
        }
    }
}

fn config_err(e: FilterError) -> BenchError {
    BenchError::Config(e.to_string())
}

impl BenchConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
    }

    /// Reads a config file. Relative `output_dir` values stay relative to the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn scenario(&self) -> Result<Scenario, BenchError> {
        let cv = CvModel::new(self.dt, self.sigma_cv).map_err(config_err)?;
        let sensors = match &self.sensors {
            Some(p) => SensorField::new(p.clone()),
            None => SensorField::grid(self.sensor_grid, self.sensor_extent),
        }
        .map_err(config_err)?;
        if !(self.init_cov_scale > 0.0) {
            return Err(BenchError::Config("init_cov_scale must be positive".into()));
        }
        let init_belief = GaussianBelief::new(
            DVector::from_row_slice(&self.init_state),
            DMatrix::identity(STATE_DIM, STATE_DIM) * self.init_cov_scale,
        )
        .map_err(config_err)?;
        if self.mismatch_scales.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(BenchError::Config("mismatch scales must be non-negative".into()));
        }
        let mut columns = AssumedQ::table_columns(&cv, &self.mismatch_scales);
        if !self.include_match {
            columns.pop();
        }
        let scenario = Scenario {
            cv,
            sensors,
            horizon: self.horizon,
            meas_noise: DMatrix::from_diagonal(&DVector::from_row_slice(&self.meas_noise)),
            columns,
            n_runs: self.n_runs,
            seed: self.seed,
            init_belief,
            measurement: match self.measurement {
                MeasurementChoice::Range => MeasurementKind::Range,
                MeasurementChoice::Linear => MeasurementKind::Linear,
            },
        };
        scenario.validate().map_err(config_err)?;
        Ok(scenario)
    }

    /// Parses one filter name (`ekf`, `ukf`, `pf`, `enkf`, `kalman`, `ef_<alpha>`).
    pub fn filter_spec(&self, name: &str) -> Result<FilterSpec, BenchError> {
        let spec = match name {
            "kalman" => FilterSpec::Kalman,
            "ekf" => FilterSpec::Ekf,
            "ukf" => FilterSpec::Ukf(UkfParams {
                spread: self.ukf.spread,
                beta: self.ukf.beta,
                kappa: self.ukf.kappa.unwrap_or(3.0 - STATE_DIM as f64),
            }),
            "pf" => FilterSpec::Pf {
                particles: self.pf.particles,
            },
            "enkf" => FilterSpec::Enkf {
                members: self.enkf.members,
            },
            other => {
                let alpha = other
                    .strip_prefix("ef_")
                    .and_then(|a| a.parse::<f64>().ok())
                    .ok_or_else(|| BenchError::Config(format!("unknown filter `{other}`")))?;
                let cfg = self.efkf.alpha_config(alpha);
                cfg.validate().map_err(config_err)?;
                FilterSpec::Efkf(cfg)
            }
        };
        match spec {
            FilterSpec::Pf { particles: 0 } => Err(BenchError::Config("pf.particles must be positive".into())),
            FilterSpec::Enkf { members } if members < 2 => {
                Err(BenchError::Config("enkf.members must be at least 2".into()))
            }
            spec => Ok(spec),
        }
    }

    pub fn filter_specs(&self) -> Result<Vec<FilterSpec>, BenchError> {
        if self.filters.is_empty() {
            return Err(BenchError::Config("no filters selected".into()));
        }
        let specs = self
            .filters
            .iter()
            .map(|f| self.filter_spec(f))
            .collect::<Result<Vec<_>, _>>()?;
        let mut labels: Vec<String> = specs.iter().map(FilterSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(BenchError::Config("duplicate filter".into()));
        }
        Ok(specs)
    }
}

/// Decimal rendering with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let decimals = |v: f64| (5 - v.abs().log10().floor() as i32).max(0) as usize;
    let mut dec = decimals(x);
    let mut s = format!("{x:.dec$}");
    // Rounding can carry into a new leading digit (9.999999 -> 10.00000).
    let rounded: f64 = s.parse().unwrap_or(x);
    if rounded != 0.0 && decimals(rounded) < dec {
        dec = decimals(rounded);
        s = format!("{x:.dec$}");
    }
    s
}

/// One row of the RMSE table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub filter: String,
    pub assumed_q_label: String,
    pub mean_rmse: f64,
    pub stderr_rmse: f64,
    pub n_failed_runs: usize,
}

pub fn table_rows(result: &BenchmarkResult) -> Vec<TableRow> {
    result
        .cells
        .iter()
        .map(|c| TableRow {
            filter: c.filter.clone(),
            assumed_q_label: c.column.clone(),
            mean_rmse: c.mean_rmse(),
            stderr_rmse: c.stderr_rmse(),
            n_failed_runs: c.n_failed(),
        })
        .collect()
}

pub fn write_rmse_table(path: &Path, rows: &[TableRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["filter", "assumed_q_label", "mean_rmse", "stderr_rmse", "n_failed_runs"])?;
    for r in rows {
        w.write_record([
            r.filter.clone(),
            r.assumed_q_label.clone(),
            format_sig6(r.mean_rmse),
            format_sig6(r.stderr_rmse),
            r.n_failed_runs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `paths_<filter>_<run>.csv` for the first `n_paths` runs of `column`.
/// Failed runs get no file. Returns the paths written.
pub fn write_paths(
    dir: &Path,
    result: &BenchmarkResult,
    column: &str,
    n_paths: usize,
) -> Result<Vec<PathBuf>, BenchError> {
    let mut written = Vec::new();
    for cell in result.cells.iter().filter(|c| c.column == column) {
        for (run, outcome) in cell.runs.iter().enumerate().take(n_paths) {
            let RunOutcome::Ok { estimates, .. } = outcome else {
                continue;
            };
            let truth = &result.runs[run].truth;
            let path = dir.join(format!("paths_{}_{}.csv", cell.filter, run));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["t", "true_px", "true_py", "est_px", "est_py"])?;
            for t in 0..truth.nrows() {
                w.write_record([
                    (t + 1).to_string(),
                    format_sig6(truth[(t, 0)]),
                    format_sig6(truth[(t, 2)]),
                    format_sig6(estimates[(t, 0)]),
                    format_sig6(estimates[(t, 2)]),
                ])?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn write_energy_trace(path: &Path, trace: &FilterTrace) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "energy", "step_size"])?;
    for (i, r) in trace.records.iter().enumerate() {
        w.write_record([i.to_string(), format_sig6(r.energy), format_sig6(r.step_size)])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text rendering of the table for standard output.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = Vec::new();
    let _ = writeln!(
        out,
        "{:<10} {:>10} {:>12} {:>12} {:>8}",
        "filter", "assumed_q", "mean_rmse", "stderr", "failed"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>12} {:>12} {:>8}",
            r.filter,
            r.assumed_q_label,
            format_sig6(r.mean_rmse),
            format_sig6(r.stderr_rmse),
            r.n_failed_runs
        );
    }
    String::from_utf8(out).expect("table is ascii")
}

/// Cells in which every run failed.
pub fn fully_failed_cells(result: &BenchmarkResult) -> Vec<String> {
    result
        .cells
        .iter()
        .filter(|c| !c.runs.is_empty() && c.n_failed() == c.runs.len())
        .map(|c| format!("{}/{}", c.filter, c.column))
        .collect()
}
