//! Finite-difference verification of the hand-derived energy gradients.
//!
//! The oracle only calls [`energy_estimate`]; it shares no code with the
//! analytic gradient path beyond the estimator being differentiated.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::energy::{energy_estimate, energy_gradients, EnergyGradients};
use crate::error::{FilterError, Result};
use crate::gaussian::GaussianBelief;
use crate::model::MeasurementModel;
use crate::tracking::range_model;

pub const MEAN_TOLERANCE: f64 = 1e-5;
pub const COV_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

const ALPHAS: [f64; 3] = [0.1, 0.5, 0.9];
const SAMPLE_COUNTS: [usize; 2] = [1, 8];

/// A random range-sensor problem with fixed draws.
#[derive(Debug, Clone)]
pub struct Instance {
    pub prior: GaussianBelief,
    pub q: GaussianBelief,
    pub model: MeasurementModel,
    pub y: DVector<f64>,
    pub eps: DMatrix<f64>,
    pub alpha: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    (&a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.3) * scale
}

/// Builds a random instance with three range sensors. `d = 2` observes a
/// planar position directly; `d >= 4` uses the `[px, vx, py, vy]` layout.
pub fn random_instance(d: usize, alpha: f64, samples: usize, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let position_index = match d {
        2 => (0, 1),
        d if d >= 4 => (0, 2),
        _ => {
            return Err(FilterError::InvalidConfig(format!(
                "gradient check supports d = 2 or d >= 4, got {d}"
            )))
        }
    };
    let prior_mean = DVector::from_fn(d, |_, _| 2.0 * normal(rng));
    let prior = GaussianBelief::new(prior_mean, random_spd(d, 1.0, rng))?;
    let q_mean = prior.mean() + DVector::from_fn(d, |_, _| 0.5 * normal(rng));
    let q = GaussianBelief::new(q_mean, random_spd(d, 0.6, rng))?;

    let centre = [prior.mean()[position_index.0], prior.mean()[position_index.1]];
    let sensors: Vec<[f64; 2]> = (0..3)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * (k as f64 / 3.0) + 0.3 * normal(rng);
            let radius = 8.0 + 4.0 * rng.random::<f64>();
            [centre[0] + radius * angle.cos(), centre[1] + radius * angle.sin()]
        })
        .collect();
    let noise = DMatrix::from_diagonal(&DVector::from_fn(3, |_, _| 0.5 + rng.random::<f64>()));
    let model = range_model(sensors, noise, d, position_index)?;
    let truth = prior.mean() + DVector::from_fn(d, |_, _| normal(rng));
    let y = model.eval(&truth) + DVector::from_fn(3, |_, _| 0.7 * normal(rng));
    let eps = DMatrix::from_fn(samples, d, |_, _| normal(rng));
    Ok(Instance {
        prior,
        q,
        model,
        y,
        eps,
        alpha,
    })
}

/// Central finite differences of the energy estimate at fixed draws.
///
/// Covariance entries are perturbed symmetrically; an off-diagonal pair moves
/// two entries, so its difference quotient is halved to compare with the
/// symmetric gradient.
pub fn fd_gradients(inst: &Instance, step: f64) -> Result<EnergyGradients> {
    let d = inst.q.dim();
    let energy = |q: &GaussianBelief| -> Result<f64> {
        Ok(energy_estimate(&inst.eps, &inst.y, &inst.model, q, &inst.prior, inst.alpha)?.value)
    };
    let mut mean = DVector::<f64>::zeros(d);
    for i in 0..d {
        let mut up = inst.q.mean().clone();
        let mut dn = inst.q.mean().clone();
        up[i] += step;
        dn[i] -= step;
        let fp = energy(&GaussianBelief::new(up, inst.q.cov().clone())?)?;
        let fm = energy(&GaussianBelief::new(dn, inst.q.cov().clone())?)?;
        mean[i] = (fp - fm) / (2.0 * step);
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut up = inst.q.cov().clone();
            let mut dn = inst.q.cov().clone();
            up[(i, j)] += step;
            dn[(i, j)] -= step;
            if i != j {
                up[(j, i)] += step;
                dn[(j, i)] -= step;
            }
            let fp = energy(&GaussianBelief::new(inst.q.mean().clone(), up)?)?;
            let fm = energy(&GaussianBelief::new(inst.q.mean().clone(), dn)?)?;
            let mut g = (fp - fm) / (2.0 * step);
            if i != j {
                g *= 0.5;
            }
            cov[(i, j)] = g;
            cov[(j, i)] = g;
        }
    }
    Ok(EnergyGradients { mean, cov })
}

/// Norm-wise relative error `|a - b| / max(|b|, 1e-8)`.
pub fn relative_error<S: nalgebra::Dim, C: nalgebra::Dim>(
    a: &nalgebra::OMatrix<f64, S, C>,
    b: &nalgebra::OMatrix<f64, S, C>,
) -> f64
where
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<S, C>,
{
    (a - b).norm() / b.norm().max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub dims: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Perturbs the analytic gradient before comparison (negative control).
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            dims: vec![2, 4],
            trials: 24,
            seed: 20_190_512,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub dim: usize,
    pub alpha: f64,
    pub samples: usize,
    pub mean_error: f64,
    pub cov_error: f64,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.mean_error <= MEAN_TOLERANCE && self.cov_error <= COV_TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn worst_mean_error(&self) -> f64 {
        self.cases.iter().map(|c| c.mean_error).fold(0.0, f64::max)
    }

    pub fn worst_cov_error(&self) -> f64 {
        self.cases.iter().map(|c| c.cov_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(GradcheckCase::passed)
    }
}

/// Cycles through dimensions, alphas and sample counts for `trials` random instances.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.trials == 0 {
        return Err(FilterError::InvalidConfig("trials must be at least 1".into()));
    }
    if opts.dims.is_empty() {
        return Err(FilterError::InvalidConfig("at least one dimension is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let nd = opts.dims.len();
    let mut cases = Vec::with_capacity(opts.trials);
    for k in 0..opts.trials {
        let dim = opts.dims[k % nd];
        let alpha = ALPHAS[(k / nd) % ALPHAS.len()];
        let samples = SAMPLE_COUNTS[(k / (nd * ALPHAS.len())) % SAMPLE_COUNTS.len()];
        let inst = random_instance(dim, alpha, samples, &mut rng)?;
        let mut analytic = energy_gradients(&inst.eps, &inst.y, &inst.model, &inst.q, &inst.prior, alpha)?;
        if opts.corrupt {
            analytic.mean[0] += 1e-3 * (1.0 + analytic.mean.norm());
            analytic.cov[(0, 0)] += 1e-2 * (1.0 + analytic.cov.norm());
        }
        let fd = fd_gradients(&inst, FD_STEP)?;
        cases.push(GradcheckCase {
            dim,
            alpha,
            samples,
            mean_error: relative_error(&analytic.mean, &fd.mean),
            cov_error: relative_error(&analytic.cov, &fd.cov),
        });
    }
    Ok(GradcheckReport { cases })
}
