//! Constant-velocity target tracking with range-only sensors.
//!
//! State layout is `[px, vx, py, vy]`. At every step the three sensors nearest
//! to the true position are active, ordered by distance, and report noisy
//! Euclidean ranges. Filters are run on common random numbers: the truth and
//! the measurement stream for a run depend only on `(seed, run)`, and each
//! `(filter, column, run)` cell owns a derived RNG stream for its own sampling.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{
    ekf_update, enkf_update, ensemble_mean, kalman_update, pf_step, propagate_ensemble,
    sample_belief, ukf_update, ParticleEnsemble, UkfParams,
};
use crate::energy::{efkf_update, predict, AlphaConfig, FilterTrace};
use crate::error::{check_dim, FilterError, Result};
use crate::gaussian::GaussianBelief;
use crate::model::MeasurementModel;

pub const STATE_DIM: usize = 4;
pub const ACTIVE_SENSORS: usize = 3;
const PX: usize = 0;
const PY: usize = 2;

/// Constant-velocity dynamics with white-acceleration noise intensity `sigma_cv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvModel {
    pub dt: f64,
    pub sigma_cv: f64,
}

impl CvModel {
    pub fn new(dt: f64, sigma_cv: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FilterError::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        if !(sigma_cv >= 0.0 && sigma_cv.is_finite()) {
            return Err(FilterError::InvalidConfig(format!(
                "sigma_cv must be non-negative, got {sigma_cv}"
            )));
        }
        Ok(Self { dt, sigma_cv })
    }

    /// Block-diagonal `F` with blocks `[[1, dt], [0, 1]]`.
    pub fn transition(&self) -> DMatrix<f64> {
        let mut f = DMatrix::<f64>::identity(STATE_DIM, STATE_DIM);
        f[(0, 1)] = self.dt;
        f[(2, 3)] = self.dt;
        f
    }

    /// Block-diagonal `Q` with blocks `sigma_cv [[dt^4/4, dt^3/2], [dt^3/2, dt^2]]`.
    pub fn process_noise(&self) -> DMatrix<f64> {
        let dt = self.dt;
        let block = [
            [dt.powi(4) / 4.0, dt.powi(3) / 2.0],
            [dt.powi(3) / 2.0, dt * dt],
        ];
        let mut q = DMatrix::<f64>::zeros(STATE_DIM, STATE_DIM);
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    q[(2 * b + i, 2 * b + j)] = self.sigma_cv * block[i][j];
                }
            }
        }
        q
    }
}

/// Rule used to pick the active sensors at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveRule {
    /// The three sensors closest to the true position, nearest first.
    NearestThree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorField {
    pub positions: Vec<[f64; 2]>,
    pub rule: ActiveRule,
}

impl SensorField {
    pub fn new(positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() < ACTIVE_SENSORS {
            return Err(FilterError::InvalidConfig(format!(
                "need at least {ACTIVE_SENSORS} sensors, got {}",
                positions.len()
            )));
        }
        Ok(Self {
            positions,
            rule: ActiveRule::NearestThree,
        })
    }

    /// `n x n` uniform grid over `[-extent, extent]^2`.
    pub fn grid(n: usize, extent: f64) -> Result<Self> {
        if n < 2 {
            return Err(FilterError::InvalidConfig("sensor grid needs at least 2 per side".into()));
        }
        let step = 2.0 * extent / (n - 1) as f64;
        let mut positions = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                positions.push([-extent + step * j as f64, -extent + step * i as f64]);
            }
        }
        Self::new(positions)
    }

    pub fn active(&self, position: [f64; 2]) -> [usize; ACTIVE_SENSORS] {
        match self.rule {
            ActiveRule::NearestThree => {
                let mut order: Vec<(f64, usize)> = self
                    .positions
                    .iter()
                    .enumerate()
                    .map(|(i, s)| ((position[0] - s[0]).hypot(position[1] - s[1]), i))
                    .collect();
                order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                [order[0].1, order[1].1, order[2].1]
            }
        }
    }

    pub fn translated(&self, offset: [f64; 2]) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .map(|s| [s[0] + offset[0], s[1] + offset[1]])
                .collect(),
            rule: self.rule,
        }
    }
}

/// Range measurements to fixed sensors. `position_index` names the state
/// components holding the planar position.
///
/// The Jacobian row of a sensor coinciding with the position is zero.
pub fn range_model(
    sensors: Vec<[f64; 2]>,
    noise_cov: DMatrix<f64>,
    state_dim: usize,
    position_index: (usize, usize),
) -> Result<MeasurementModel> {
    let (ix, iy) = position_index;
    if ix >= state_dim || iy >= state_dim {
        return Err(FilterError::InvalidConfig("position index out of range".into()));
    }
    let m = sensors.len();
    let sensors = Arc::new(sensors);
    let s_h = Arc::clone(&sensors);
    let h = move |x: &DVector<f64>| {
        DVector::from_iterator(
            s_h.len(),
            s_h.iter().map(|s| (x[ix] - s[0]).hypot(x[iy] - s[1])),
        )
    };
    let jac = move |x: &DVector<f64>| {
        let mut j = DMatrix::<f64>::zeros(sensors.len(), state_dim);
        for (k, s) in sensors.iter().enumerate() {
            let dx = x[ix] - s[0];
            let dy = x[iy] - s[1];
            let r = dx.hypot(dy);
            if r > 0.0 {
                j[(k, ix)] = dx / r;
                j[(k, iy)] = dy / r;
            }
        }
        j
    };
    MeasurementModel::new(state_dim, m, Arc::new(h), Arc::new(jac), noise_cov)
}

/// Measurement model for the given active sensors of a field, on the CV state.
pub fn active_range_model(
    field: &SensorField,
    active: &[usize],
    noise_cov: &DMatrix<f64>,
) -> Result<MeasurementModel> {
    let sensors = active.iter().map(|&i| field.positions[i]).collect();
    range_model(sensors, noise_cov.clone(), STATE_DIM, (PX, PY))
}

/// Linear stand-in observing `px`, `py` and `px + py`.
pub fn linear_observation_matrix() -> DMatrix<f64> {
    let mut h = DMatrix::<f64>::zeros(ACTIVE_SENSORS, STATE_DIM);
    h[(0, PX)] = 1.0;
    h[(1, PY)] = 1.0;
    h[(2, PX)] = 1.0;
    h[(2, PY)] = 1.0;
    h
}

pub fn position(state: &DVector<f64>) -> [f64; 2] {
    [state[PX], state[PY]]
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(rand_distr::StandardNormal))
}

/// Rolls the CV model forward `horizon` steps from `init_state`; row `t`
/// holds the state after `t + 1` transitions.
pub fn simulate_trajectory(
    cv: &CvModel,
    init_state: &DVector<f64>,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    check_dim("initial state", STATE_DIM, init_state.len())?;
    let f = cv.transition();
    let lq = crate::baselines::psd_factor(&cv.process_noise())?;
    let mut out = DMatrix::<f64>::zeros(horizon, STATE_DIM);
    let mut x = init_state.clone();
    for t in 0..horizon {
        x = &f * &x + &lq * standard_normal_vec(rng, STATE_DIM);
        out.set_row(t, &x.transpose());
    }
    Ok(out)
}

/// Noisy ranges from the active sensors to the state's position.
pub fn measure(
    state: &DVector<f64>,
    field: &SensorField,
    noise_cov: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(DVector<f64>, [usize; ACTIVE_SENSORS])> {
    let active = field.active(position(state));
    let model = active_range_model(field, &active, noise_cov)?;
    let lr = model.noise_cholesky().lower().clone();
    let y = model.eval(state) + lr * standard_normal_vec(rng, ACTIVE_SENSORS);
    Ok((y, active))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementKind {
    Range,
    /// Linear stand-in (see [`linear_observation_matrix`]).
    Linear,
}

/// One column of the benchmark table: the process noise the filters assume.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumedQ {
    pub label: String,
    pub q: DMatrix<f64>,
}

impl AssumedQ {
    /// The four mismatch columns `c * I` followed by the true CV covariance.
    pub fn table_columns(cv: &CvModel, scales: &[f64]) -> Vec<AssumedQ> {
        let mut cols: Vec<AssumedQ> = scales
            .iter()
            .map(|&c| AssumedQ {
                label: format!("{c}I"),
                q: DMatrix::identity(STATE_DIM, STATE_DIM) * c,
            })
            .collect();
        cols.push(AssumedQ {
            label: "Q_CV".into(),
            q: cv.process_noise(),
        });
        cols
    }
}

pub const MISMATCH_SCALES: [f64; 4] = [0.01, 0.05, 0.1, 0.5];

#[derive(Debug, Clone)]
pub struct Scenario {
    pub cv: CvModel,
    pub sensors: SensorField,
    pub horizon: usize,
    pub meas_noise: DMatrix<f64>,
    pub columns: Vec<AssumedQ>,
    pub n_runs: usize,
    pub seed: u64,
    pub init_belief: GaussianBelief,
    pub measurement: MeasurementKind,
}

impl Default for Scenario {
    fn default() -> Self {
        let cv = CvModel::new(1.0, 1.0).expect("valid defaults");
        let init_state = DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0]);
        Self {
            cv,
            sensors: SensorField::grid(3, DEFAULT_SENSOR_EXTENT).expect("valid defaults"),
            horizon: 30,
            meas_noise: DMatrix::identity(ACTIVE_SENSORS, ACTIVE_SENSORS),
            columns: AssumedQ::table_columns(&cv, &MISMATCH_SCALES),
            n_runs: 100,
            seed: 0,
            init_belief: GaussianBelief::new(init_state, DMatrix::identity(STATE_DIM, STATE_DIM) * 10.0)
                .expect("valid defaults"),
            measurement: MeasurementKind::Range,
        }
    }
}

/// Half-width of the default 3 x 3 sensor grid.
pub const DEFAULT_SENSOR_EXTENT: f64 = 10.0;

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(FilterError::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.n_runs == 0 {
            return Err(FilterError::InvalidConfig("n_runs must be at least 1".into()));
        }
        if self.columns.is_empty() {
            return Err(FilterError::InvalidConfig("no assumed-Q columns".into()));
        }
        check_dim("initial belief", STATE_DIM, self.init_belief.dim())?;
        check_dim("measurement noise rows", ACTIVE_SENSORS, self.meas_noise.nrows())?;
        check_dim("measurement noise cols", ACTIVE_SENSORS, self.meas_noise.ncols())?;
        crate::gaussian::cholesky(&self.meas_noise)?;
        for c in &self.columns {
            check_dim("assumed Q", STATE_DIM, c.q.nrows())?;
            check_dim("assumed Q", STATE_DIM, c.q.ncols())?;
        }
        Ok(())
    }

    /// Index of the column whose covariance equals the true CV covariance.
    pub fn match_column(&self) -> Option<usize> {
        let q = self.cv.process_noise();
        self.columns.iter().position(|c| c.q == q)
    }

    fn observation_model(&self, active: &[usize]) -> Result<MeasurementModel> {
        match self.measurement {
            MeasurementKind::Range => active_range_model(&self.sensors, active, &self.meas_noise),
            MeasurementKind::Linear => {
                MeasurementModel::linear(linear_observation_matrix(), self.meas_noise.clone())
            }
        }
    }
}

/// Truth and measurements of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub truth: DMatrix<f64>,
    pub observations: Vec<DVector<f64>>,
    pub active: Vec<[usize; ACTIVE_SENSORS]>,
}

impl RunData {
    /// Order-sensitive digest of the truth and measurement stream.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        for v in self.truth.iter() {
            h.write_u64(v.to_bits());
        }
        for (y, a) in self.observations.iter().zip(&self.active) {
            for v in y.iter() {
                h.write_u64(v.to_bits());
            }
            for &i in a {
                h.write_u64(i as u64);
            }
        }
        h.finish()
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Mixes a master seed with stream identifiers (SplitMix64 finalizer per part).
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut z = master;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const STREAM_TRUTH: u64 = 1;
const STREAM_FILTER: u64 = 2;

pub fn simulate_run(scenario: &Scenario, run: usize) -> Result<RunData> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed, &[STREAM_TRUTH, run as u64]));
    let truth = simulate_trajectory(&scenario.cv, scenario.init_belief.mean(), scenario.horizon, &mut rng)?;
    let mut observations = Vec::with_capacity(scenario.horizon);
    let mut active = Vec::with_capacity(scenario.horizon);
    for t in 0..scenario.horizon {
        let x: DVector<f64> = truth.row(t).transpose();
        let ids = scenario.sensors.active(position(&x));
        let model = scenario.observation_model(&ids)?;
        let lr = model.noise_cholesky().lower().clone();
        let y = model.eval(&x) + lr * standard_normal_vec(&mut rng, ACTIVE_SENSORS);
        observations.push(y);
        active.push(ids);
    }
    Ok(RunData {
        truth,
        observations,
        active,
    })
}

/// Filter selection with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterSpec {
    /// Exact Kalman filter; only valid with linear measurements.
    Kalman,
    Ekf,
    Ukf(UkfParams),
    Pf { particles: usize },
    Enkf { members: usize },
    Efkf(AlphaConfig),
}

impl FilterSpec {
    pub fn label(&self) -> String {
        match self {
            FilterSpec::Kalman => "kalman".into(),
            FilterSpec::Ekf => "ekf".into(),
            FilterSpec::Ukf(_) => "ukf".into(),
            FilterSpec::Pf { .. } => "pf".into(),
            FilterSpec::Enkf { .. } => "enkf".into(),
            FilterSpec::Efkf(c) => format!("ef_{}", c.alpha),
        }
    }

    fn stream_id(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_bytes(self.label().as_bytes());
        h.finish()
    }
}

enum FilterState {
    Gaussian(GaussianBelief),
    Particles(ParticleEnsemble),
    Ensemble(DMatrix<f64>),
}

impl FilterState {
    fn estimate(&self) -> DVector<f64> {
        match self {
            FilterState::Gaussian(b) => b.mean().clone(),
            FilterState::Particles(p) => p.mean(),
            FilterState::Ensemble(e) => ensemble_mean(e),
        }
    }
}

/// Runs one filter over one run's measurements; returns the `T x 4` matrix of
/// posterior-mean estimates.
pub fn filter_run(
    spec: &FilterSpec,
    scenario: &Scenario,
    assumed_q: &DMatrix<f64>,
    data: &RunData,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    Ok(filter_run_inner(spec, scenario, assumed_q, data, rng, None)?.0)
}

fn filter_run_inner(
    spec: &FilterSpec,
    scenario: &Scenario,
    assumed_q: &DMatrix<f64>,
    data: &RunData,
    rng: &mut ChaCha8Rng,
    capture: Option<usize>,
) -> Result<(DMatrix<f64>, Option<FilterTrace>)> {
    let mut captured = None;
    let f = scenario.cv.transition();
    let mut state = match spec {
        FilterSpec::Pf { particles } => {
            FilterState::Particles(ParticleEnsemble::from_belief(&scenario.init_belief, *particles, rng)?)
        }
        FilterSpec::Enkf { members } => {
            FilterState::Ensemble(sample_belief(&scenario.init_belief, *members, rng))
        }
        _ => FilterState::Gaussian(scenario.init_belief.clone()),
    };
    let mut estimates = DMatrix::<f64>::zeros(data.observations.len(), STATE_DIM);
    for (t, (y, active)) in data.observations.iter().zip(&data.active).enumerate() {
        let model = scenario.observation_model(active)?;
        state = match (spec, state) {
            (FilterSpec::Pf { .. }, FilterState::Particles(p)) => {
                FilterState::Particles(pf_step(&p, y, &f, assumed_q, &model, rng)?)
            }
            (FilterSpec::Enkf { .. }, FilterState::Ensemble(e)) => {
                let forecast = propagate_ensemble(&e, &f, assumed_q, rng)?;
                FilterState::Ensemble(enkf_update(&forecast, y, &model, rng)?)
            }
            (spec, FilterState::Gaussian(b)) => {
                let prior = predict(&b, &f, assumed_q)?;
                let post = match spec {
                    FilterSpec::Kalman => match scenario.measurement {
                        MeasurementKind::Linear => {
                            kalman_update(&prior, y, &linear_observation_matrix(), &scenario.meas_noise)?
                        }
                        MeasurementKind::Range => {
                            return Err(FilterError::InvalidConfig(
                                "the exact Kalman filter needs linear measurements".into(),
                            ))
                        }
                    },
                    FilterSpec::Ekf => ekf_update(&prior, y, &model)?,
                    FilterSpec::Ukf(p) => ukf_update(&prior, y, &model, p)?,
                    FilterSpec::Efkf(cfg) => {
                        let step_cfg = AlphaConfig {
                            seed: derive_seed(cfg.seed, &[rng.random::<u64>()]),
                            ..cfg.clone()
                        };
                        let (post, trace) = efkf_update(&prior, y, &model, &step_cfg)?;
                        if capture == Some(t) {
                            captured = Some(trace);
                        }
                        post
                    }
                    FilterSpec::Pf { .. } | FilterSpec::Enkf { .. } => unreachable!(),
                };
                FilterState::Gaussian(post)
            }
            _ => unreachable!("filter state always matches its spec"),
        };
        estimates.set_row(t, &state.estimate().transpose());
        if captured.is_some() {
            break;
        }
    }
    Ok((estimates, captured))
}

/// Replays the benchmark cell `(spec, column, run)` of an EFKF filter and
/// returns the optimization trace of its measurement update at step `step`.
pub fn efkf_cell_trace(
    spec: &FilterSpec,
    scenario: &Scenario,
    column: usize,
    run: usize,
    step: usize,
) -> Result<FilterTrace> {
    scenario.validate()?;
    if !matches!(spec, FilterSpec::Efkf(_)) {
        return Err(FilterError::InvalidConfig(format!(
            "energy traces need an ef_<alpha> filter, got {}",
            spec.label()
        )));
    }
    if column >= scenario.columns.len() {
        return Err(FilterError::InvalidConfig(format!("column {column} out of range")));
    }
    if run >= scenario.n_runs || step >= scenario.horizon {
        return Err(FilterError::InvalidConfig(format!(
            "run {run} / step {step} outside {} runs x {} steps",
            scenario.n_runs, scenario.horizon
        )));
    }
    let data = simulate_run(scenario, run)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(spec, scenario, column, run));
    let (_, trace) = filter_run_inner(spec, scenario, &scenario.columns[column].q, &data, &mut rng, Some(step))?;
    trace.ok_or_else(|| FilterError::InvalidConfig("step was not reached".into()))
}

/// Root mean squared position error over all steps.
pub fn position_rmse(truth: &DMatrix<f64>, estimates: &DMatrix<f64>) -> f64 {
    let t = truth.nrows();
    let mut acc = 0.0;
    for i in 0..t {
        acc += (truth[(i, PX)] - estimates[(i, PX)]).powi(2) + (truth[(i, PY)] - estimates[(i, PY)]).powi(2);
    }
    (acc / t as f64).sqrt()
}

/// Outcome of one filter on one run.
#[derive(Debug, Clone)]
pub enum RunOutcome {
    Ok { rmse: f64, estimates: DMatrix<f64> },
    Failed(FilterError),
}

/// All runs of one `(filter, assumed Q)` cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub filter: String,
    pub column: String,
    pub runs: Vec<RunOutcome>,
}

impl CellResult {
    pub fn rmse_values(&self) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| match r {
                RunOutcome::Ok { rmse, .. } => Some(*rmse),
                RunOutcome::Failed(_) => None,
            })
            .collect()
    }

    pub fn n_failed(&self) -> usize {
        self.runs.iter().filter(|r| matches!(r, RunOutcome::Failed(_))).count()
    }

    /// Mean RMSE over successful runs (NaN when all failed).
    pub fn mean_rmse(&self) -> f64 {
        let v = self.rmse_values();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Standard error of the mean RMSE (0 with fewer than two successful runs).
    pub fn stderr_rmse(&self) -> f64 {
        let v = self.rmse_values();
        if v.len() < 2 {
            return 0.0;
        }
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }
}

fn cell_seed(spec: &FilterSpec, scenario: &Scenario, column: usize, run: usize) -> u64 {
    derive_seed(
        scenario.seed,
        &[STREAM_FILTER, spec.stream_id(), column as u64, run as u64],
    )
}

fn run_cell_task(
    spec: &FilterSpec,
    scenario: &Scenario,
    column: usize,
    run: usize,
    data: &RunData,
) -> RunOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(spec, scenario, column, run));
    match filter_run(spec, scenario, &scenario.columns[column].q, data, &mut rng) {
        Ok(estimates) => {
            let rmse = position_rmse(&data.truth, &estimates);
            if rmse.is_finite() {
                RunOutcome::Ok { rmse, estimates }
            } else {
                RunOutcome::Failed(FilterError::NonFinite("estimate"))
            }
        }
        Err(e) => RunOutcome::Failed(e),
    }
}

/// Runs one filter on every run of one column.
pub fn run_filter_on_scenario(spec: &FilterSpec, scenario: &Scenario, column: usize) -> Result<CellResult> {
    scenario.validate()?;
    if column >= scenario.columns.len() {
        return Err(FilterError::InvalidConfig(format!("column {column} out of range")));
    }
    let runs = (0..scenario.n_runs)
        .map(|run| Ok(run_cell_task(spec, scenario, column, run, &simulate_run(scenario, run)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellResult {
        filter: spec.label(),
        column: scenario.columns[column].label.clone(),
        runs,
    })
}

/// Full grid of filters x columns, filter-major order.
#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub cells: Vec<CellResult>,
    pub runs: Vec<RunData>,
}

impl BenchmarkResult {
    pub fn cell(&self, filter: &str, column: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.filter == filter && c.column == column)
    }
}

/// Evaluates every `(filter, column, run)` triple. Work is spread over the
/// current rayon pool; results do not depend on the degree of parallelism.
pub fn benchmark_table(scenario: &Scenario, filters: &[FilterSpec]) -> Result<BenchmarkResult> {
    scenario.validate()?;
    let runs = (0..scenario.n_runs)
        .into_par_iter()
        .map(|run| simulate_run(scenario, run))
        .collect::<Result<Vec<_>>>()?;
    let n_cols = scenario.columns.len();
    let tasks: Vec<(usize, usize, usize)> = (0..filters.len())
        .flat_map(|f| (0..n_cols).flat_map(move |c| (0..scenario.n_runs).map(move |r| (f, c, r))))
        .collect();
    let outcomes: Vec<RunOutcome> = tasks
        .par_iter()
        .map(|&(f, c, r)| run_cell_task(&filters[f], scenario, c, r, &runs[r]))
        .collect();
    let mut it = outcomes.into_iter();
    let mut cells = Vec::with_capacity(filters.len() * n_cols);
    for spec in filters {
        for col in &scenario.columns {
            cells.push(CellResult {
                filter: spec.label(),
                column: col.label.clone(),
                runs: it.by_ref().take(scenario.n_runs).collect(),
            });
        }
    }
    Ok(BenchmarkResult { cells, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn cv_matrices() {
        let cv = CvModel::new(1.0, 1.0).unwrap();
        let f = cv.transition();
        assert_eq!(f.fixed_view::<2, 2>(0, 0), dmatrix![1.0, 1.0; 0.0, 1.0]);
        assert_eq!(f.fixed_view::<2, 2>(2, 2), dmatrix![1.0, 1.0; 0.0, 1.0]);
        assert_eq!(f[(0, 2)], 0.0);
        let q = cv.process_noise();
        assert_eq!(q.fixed_view::<2, 2>(0, 0), dmatrix![0.25, 0.5; 0.5, 1.0]);
        assert_eq!(q.fixed_view::<2, 2>(2, 2), dmatrix![0.25, 0.5; 0.5, 1.0]);
        assert_eq!(q[(0, 2)], 0.0);
        assert!(CvModel::new(0.0, 1.0).is_err());
    }

    #[test]
    fn noiseless_straight_line() {
        let cv = CvModel::new(1.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = simulate_trajectory(&cv, &dvector![0.0, 1.0, 0.0, 0.0], 3, &mut rng).unwrap();
        for t in 0..3 {
            assert_eq!(traj[(t, 0)], (t + 1) as f64);
            assert_eq!(traj[(t, 2)], 0.0);
        }
    }

    #[test]
    fn range_examples() {
        let model = range_model(vec![[0.0, 0.0]], dmatrix![1.0], 4, (0, 2)).unwrap();
        let x = dvector![3.0, 0.0, 4.0, 0.0];
        assert_eq!(model.eval(&x)[0], 5.0);
        let j = model.jacobian(&x);
        assert!((j[(0, 0)] - 0.6).abs() < 1e-15 && (j[(0, 2)] - 0.8).abs() < 1e-15);
        assert_eq!(j[(0, 1)], 0.0);
        assert_eq!(j[(0, 3)], 0.0);

        let at_sensor = dvector![0.0, 1.0, 0.0, 1.0];
        assert_eq!(model.eval(&at_sensor)[0], 0.0);
        assert_eq!(model.jacobian(&at_sensor).amax(), 0.0);
    }

    #[test]
    fn nearest_three_ordering() {
        let field = SensorField::grid(3, 10.0).unwrap();
        // Grid index = row * 3 + col; (9, 9) is closest to (10, 10) = index 8.
        let ids = field.active([9.0, 9.5]);
        assert_eq!(ids[0], 8);
        assert_eq!(ids.len(), 3);
        assert!(SensorField::new(vec![[0.0, 0.0]; 2]).is_err());
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(1, &[1, 0]);
        let b = derive_seed(1, &[1, 1]);
        let c = derive_seed(2, &[1, 0]);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, derive_seed(1, &[1, 0]));
    }

    #[test]
    fn rmse_of_perfect_estimate_is_zero() {
        let t = DMatrix::from_fn(5, 4, |i, j| (i * 4 + j) as f64);
        assert_eq!(position_rmse(&t, &t), 0.0);
        let mut e = t.clone();
        for i in 0..5 {
            e[(i, 0)] += 3.0;
            e[(i, 2)] += 4.0;
            e[(i, 1)] += 100.0;
        }
        assert!((position_rmse(&t, &e) - 5.0).abs() < 1e-12);
    }
}
