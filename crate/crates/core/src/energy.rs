//! Energy-minimization measurement update for alpha-divergence filtering.
//!
//! For a Gaussian prior `p0 = N(mu0, Sigma0)`, likelihood `N(y; h(x), R)` and
//! Gaussian approximation `q = N(mu, Sigma)`, the energy
//!
//! ```text
//! E(q) = log Z(p0) - log Z(q) - 1/alpha log E_q[ (p(y|x) / f(x))^alpha ]
//! ```
//!
//! with cavity factor `f(x) = exp{(lambda_q - lambda_0)^T s(x)}` has the same
//! stationary points as `D_alpha[p(x|y) || q]`. It is estimated with `S`
//! reparametrized draws `x_s = C eps_s + mu` and a max-shifted log-sum-exp,
//! and minimized by Sigma-preconditioned (natural) gradient steps.
//!
//! Gradients of the estimator are derived by hand. For fixed draws, with
//! `w_s` the softmax weights of `Psi(s)`, `a_s = J(x_s)^T R^-1 (y - h(x_s))`
//! and `Lambda = Sigma^-1`:
//!
//! ```text
//! dE/dmu    = sum_s w_s [Lambda0 (x_s - mu0) - a_s]
//! dE/dSigma = 1/2 Lambda mu mu^T Lambda - 1/2 Lambda
//!             - sym(C^-T Phi(C^T Gbar) C^-1)
//!             - Lambda (sym(mu xbar^T) - 1/2 X2) Lambda
//! ```
//!
//! where `Gbar = sum_s w_s (a_s - (eta_q - eta_0) + (Lambda - Lambda0) x_s) eps_s^T`,
//! `Phi` keeps the lower triangle and halves the diagonal (the adjoint of the
//! Cholesky differential), `xbar = sum_s w_s x_s` and `X2 = sum_s w_s x_s x_s^T`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, FilterError, Result};
use crate::gaussian::{kl_divergence, symmetrize, GaussianBelief};
use crate::model::MeasurementModel;

/// Largest energy increase tolerated for an accepted step under common random numbers.
pub const DESCENT_TOLERANCE: f64 = 1e-8;
/// Largest `KL[q_new || q]` of an accepted iterate in [`efkf_update`].
pub const MAX_STEP_KL: f64 = 0.5;
/// Step-halving budget of the natural-gradient update.
pub const MAX_HALVINGS: usize = 10;

/// Hyperparameters of the energy-minimization update.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaConfig {
    pub alpha: f64,
    pub samples: usize,
    pub iters: usize,
    pub step0: f64,
    /// Step schedule `rho_i = step0 / (1 + i)^step_decay`.
    pub step_decay: f64,
    pub seed: u64,
    /// Reuse a single set of draws for every iteration.
    pub fixed_crn: bool,
    /// Affinely standardize each draw set to zero sample mean and identity
    /// sample covariance. Only applied when `samples > dim`.
    pub standardized_draws: bool,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            samples: 64,
            iters: 100,
            step0: 0.5,
            step_decay: 0.0,
            seed: 0,
            fixed_crn: false,
            standardized_draws: true,
        }
    }
}

impl AlphaConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FilterError::InvalidConfig(msg));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if self.iters == 0 {
            return bad("iters must be at least 1".into());
        }
        if !(self.step0 >= 0.0 && self.step0.is_finite()) {
            return bad(format!("step0 must be finite and non-negative, got {}", self.step0));
        }
        if !(self.step_decay >= 0.0 && self.step_decay.is_finite()) {
            return bad(format!("step_decay must be non-negative, got {}", self.step_decay));
        }
        Ok(())
    }

    pub fn step_size(&self, iter: usize) -> f64 {
        self.step0 / (1.0 + iter as f64).powf(self.step_decay)
    }
}

/// Stabilized Monte-Carlo estimate of the energy.
#[derive(Debug, Clone)]
pub struct EnergyEstimate {
    pub value: f64,
    /// `max_s Psi(s)`.
    pub psi_max: f64,
    /// Softmax of `Psi(s)`.
    pub weights: DVector<f64>,
    /// Delta-method Monte-Carlo standard error of `value` (infinite for `S = 1`).
    pub std_error: f64,
}

#[derive(Debug, Clone)]
pub struct EnergyGradients {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub estimate: EnergyEstimate,
    pub gradients: EnergyGradients,
}

/// One iteration of the update: the iterate it started from, its energy and
/// the step size that was accepted from it.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub energy: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct FilterTrace {
    pub records: Vec<IterationRecord>,
    pub posterior: GaussianBelief,
}

// Quantities shared by every sample at a fixed (q, prior) pair.
struct Frame {
    lam_q: DMatrix<f64>,
    lam0: DMatrix<f64>,
    eta_diff: DVector<f64>,
    prec_diff: DMatrix<f64>,
    log_z0: f64,
    log_zq: f64,
}

impl Frame {
    fn new(q: &GaussianBelief, prior: &GaussianBelief) -> Result<Self> {
        check_dim("prior vs approximation", q.dim(), prior.dim())?;
        let nq = q.to_natural();
        let n0 = prior.to_natural();
        Ok(Self {
            eta_diff: &nq.eta - &n0.eta,
            prec_diff: &nq.precision - &n0.precision,
            lam_q: nq.precision,
            lam0: n0.precision,
            log_z0: prior.log_partition(),
            log_zq: q.log_partition(),
        })
    }

    fn log_f(&self, x: &DVector<f64>) -> f64 {
        self.eta_diff.dot(x) - 0.5 * x.dot(&(&self.prec_diff * x))
    }
}

struct Samples {
    eps: Vec<DVector<f64>>,
    xs: Vec<DVector<f64>>,
    residuals: Vec<DVector<f64>>,
    psi: DVector<f64>,
}

fn check_inputs(
    eps_draws: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    prior: &GaussianBelief,
    alpha: f64,
) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(FilterError::InvalidConfig(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    check_dim("prior vs approximation", q.dim(), prior.dim())?;
    check_dim("model state", model.state_dim(), q.dim())?;
    check_dim("draw columns", q.dim(), eps_draws.ncols())?;
    if eps_draws.nrows() == 0 {
        return Err(FilterError::InvalidConfig("at least one draw is required".into()));
    }
    if eps_draws.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFinite("draws"));
    }
    model.check_observation(y)
}

fn draw_samples(
    eps_draws: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    frame: &Frame,
    alpha: f64,
) -> Result<Samples> {
    let s_count = eps_draws.nrows();
    let lower = q.cholesky().lower();
    let mut eps = Vec::with_capacity(s_count);
    let mut xs = Vec::with_capacity(s_count);
    let mut residuals = Vec::with_capacity(s_count);
    let mut psi = DVector::zeros(s_count);
    for s in 0..s_count {
        let e: DVector<f64> = eps_draws.row(s).transpose();
        let x = lower * &e + q.mean();
        let r = y - model.eval(&x);
        let value = alpha * (model.log_likelihood_residual(&r) - frame.log_f(&x));
        if value.is_nan() {
            return Err(FilterError::NonFinite("psi"));
        }
        psi[s] = value;
        eps.push(e);
        xs.push(x);
        residuals.push(r);
    }
    Ok(Samples {
        eps,
        xs,
        residuals,
        psi,
    })
}

/// `Psi(s) = alpha log N(y; h(x_s), R) - alpha log f(x_s)` for `x_s = C eps_s + mu_q`.
///
/// `eps_draws` holds one standard-normal draw per row.
pub fn psi_values(
    eps_draws: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    prior: &GaussianBelief,
    alpha: f64,
) -> Result<DVector<f64>> {
    check_inputs(eps_draws, y, model, q, prior, alpha)?;
    let frame = Frame::new(q, prior)?;
    Ok(draw_samples(eps_draws, y, model, q, &frame, alpha)?.psi)
}

/// Combines `Psi` values into the stabilized energy estimate.
///
/// `value = log_z0 - log_zq - 1/alpha log(1/S sum_s exp(Psi(s) - Psi)) - Psi / alpha`
/// with `Psi = max_s Psi(s)`.
pub fn energy_from_psi(psi: &DVector<f64>, log_z0: f64, log_zq: f64, alpha: f64) -> Result<EnergyEstimate> {
    if psi.is_empty() {
        return Err(FilterError::InvalidConfig("empty psi vector".into()));
    }
    if psi.iter().any(|v| v.is_nan()) {
        return Err(FilterError::NonFinite("psi"));
    }
    let psi_max = psi.max();
    if !psi_max.is_finite() {
        return Err(FilterError::NonFinite("psi maximum"));
    }
    let shifted = psi.map(|v| (v - psi_max).exp());
    let total: f64 = shifted.sum();
    let s_count = psi.len() as f64;
    let value = log_z0 - log_zq - (total / s_count).ln() / alpha - psi_max / alpha;
    if !value.is_finite() {
        return Err(FilterError::NonFinite("energy"));
    }
    let std_error = if psi.len() < 2 {
        f64::INFINITY
    } else {
        let mean = total / s_count;
        let var = shifted.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (s_count - 1.0);
        var.sqrt() / (s_count.sqrt() * mean * alpha)
    };
    Ok(EnergyEstimate {
        value,
        psi_max,
        weights: shifted / total,
        std_error,
    })
}

/// Monte-Carlo energy estimate at fixed draws.
pub fn energy_estimate(
    eps_draws: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    prior: &GaussianBelief,
    alpha: f64,
) -> Result<EnergyEstimate> {
    check_inputs(eps_draws, y, model, q, prior, alpha)?;
    let frame = Frame::new(q, prior)?;
    let samples = draw_samples(eps_draws, y, model, q, &frame, alpha)?;
    energy_from_psi(&samples.psi, frame.log_z0, frame.log_zq, alpha)
}

/// Exact gradients of [`energy_estimate`]'s value with respect to the mean and
/// the symmetric covariance of `q`, at fixed draws.
pub fn energy_gradients(
    eps_draws: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    prior: &GaussianBelief,
    alpha: f64,
) -> Result<EnergyGradients> {
    Ok(energy_report(eps_draws, y, model, q, prior, alpha)?.gradients)
}

/// Energy estimate and its gradients from a single pass over the draws.
pub fn energy_report(
    eps_draws: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    prior: &GaussianBelief,
    alpha: f64,
) -> Result<EnergyReport> {
    check_inputs(eps_draws, y, model, q, prior, alpha)?;
    let frame = Frame::new(q, prior)?;
    let samples = draw_samples(eps_draws, y, model, q, &frame, alpha)?;
    let estimate = energy_from_psi(&samples.psi, frame.log_z0, frame.log_zq, alpha)?;
    let gradients = gradients_from_samples(&samples, &estimate.weights, model, q, prior, &frame);
    Ok(EnergyReport {
        estimate,
        gradients,
    })
}

fn gradients_from_samples(
    samples: &Samples,
    weights: &DVector<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    prior: &GaussianBelief,
    frame: &Frame,
) -> EnergyGradients {
    let d = q.dim();
    let mu = q.mean();
    let rchol = model.noise_cholesky();

    let mut xbar = DVector::<f64>::zeros(d);
    let mut x2 = DMatrix::<f64>::zeros(d, d);
    let mut a_bar = DVector::<f64>::zeros(d);
    let mut gbar = DMatrix::<f64>::zeros(d, d);
    for (s, w) in weights.iter().copied().enumerate() {
        if w == 0.0 {
            continue;
        }
        let x = &samples.xs[s];
        let a = model.jacobian(x).transpose() * rchol.solve(&samples.residuals[s]);
        let gx = &a - &frame.eta_diff + &frame.prec_diff * x;
        xbar.axpy(w, x, 1.0);
        x2.ger(w, x, x, 1.0);
        a_bar.axpy(w, &a, 1.0);
        gbar.ger(w, &gx, &samples.eps[s], 1.0);
    }

    let grad_mean = &frame.lam0 * (&xbar - prior.mean()) - a_bar;

    // Reparametrization pathway through the Cholesky factor.
    let lower = q.cholesky().lower();
    let mut phi = lower.transpose() * &gbar;
    for i in 0..d {
        for j in (i + 1)..d {
            phi[(i, j)] = 0.0;
        }
        phi[(i, i)] *= 0.5;
    }
    let linv = q.cholesky().lower_inverse();
    let reparam = symmetrize(&(linv.transpose() * phi * &linv));

    // Explicit dependence of the cavity term on Lambda = Sigma^-1.
    let e_g = symmetrize(&(mu * xbar.transpose())) - x2 * 0.5;
    let lam = &frame.lam_q;
    let lam_mu = lam * mu;
    let log_z = (&lam_mu * lam_mu.transpose() - lam) * 0.5;
    let grad_cov = log_z - reparam - lam * e_g * lam;

    EnergyGradients {
        mean: grad_mean,
        cov: symmetrize(&grad_cov),
    }
}

fn apply_step(
    q: &GaussianBelief,
    grad_mean: &DVector<f64>,
    grad_cov: &DMatrix<f64>,
    rho: f64,
) -> Result<GaussianBelief> {
    let cov = q.cov();
    let mean = q.mean() - cov * grad_mean * rho;
    let new_cov = cov - cov * grad_cov * cov * rho;
    GaussianBelief::new(mean, new_cov)
}

fn check_step_inputs(q: &GaussianBelief, grad_mean: &DVector<f64>, grad_cov: &DMatrix<f64>, rho: f64) -> Result<()> {
    check_dim("mean gradient", q.dim(), grad_mean.len())?;
    check_dim("covariance gradient rows", q.dim(), grad_cov.nrows())?;
    check_dim("covariance gradient cols", q.dim(), grad_cov.ncols())?;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(FilterError::InvalidConfig(format!("step size must be positive, got {rho}")));
    }
    Ok(())
}

// Halves `rho` until `accept` passes. Returns `q` itself with step 0 when
// every positive-definite candidate was rejected by `accept`; fails only if
// no candidate was positive definite.
fn halving_step<F>(
    q: &GaussianBelief,
    grad_mean: &DVector<f64>,
    grad_cov: &DMatrix<f64>,
    rho: f64,
    mut accept: F,
) -> Result<(GaussianBelief, f64)>
where
    F: FnMut(&GaussianBelief) -> Result<bool>,
{
    let mut step = rho;
    let mut any_pd = false;
    for _ in 0..=MAX_HALVINGS {
        if let Ok(candidate) = apply_step(q, grad_mean, grad_cov, step) {
            any_pd = true;
            if accept(&candidate)? {
                return Ok((candidate, step));
            }
        }
        step *= 0.5;
    }
    if any_pd {
        Ok((q.clone(), 0.0))
    } else {
        Err(FilterError::StepFailed {
            halvings: MAX_HALVINGS,
        })
    }
}

/// Natural-gradient step `mu - rho Sigma g_mu`, `Sigma - rho Sigma G_Sigma Sigma`.
///
/// A step that loses positive definiteness is retried with half the step size,
/// at most [`MAX_HALVINGS`] times. Returns the new belief and the accepted step.
pub fn natural_gradient_step(
    q: &GaussianBelief,
    grad_mean: &DVector<f64>,
    grad_cov: &DMatrix<f64>,
    rho: f64,
) -> Result<(GaussianBelief, f64)> {
    check_step_inputs(q, grad_mean, grad_cov, rho)?;
    halving_step(q, grad_mean, grad_cov, rho, |_| Ok(true))
}

fn standard_normal_draws(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Rescales draws so that their sample mean is zero and their sample
/// covariance (divisor `S`) is the identity.
pub fn standardize_draws(eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (s, d) = eps.shape();
    if s <= d {
        return Err(FilterError::InvalidConfig(format!(
            "standardized draws need more samples than dimensions ({s} <= {d})"
        )));
    }
    let mean = eps.row_mean();
    let mut centred = eps.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.transpose() * &centred / s as f64;
    let chol = crate::gaussian::cholesky(&symmetrize(&cov))?;
    // rows e -> L^-1 e, i.e. X -> X L^-T
    let solved = chol
        .lower()
        .solve_lower_triangular(&centred.transpose())
        .ok_or(FilterError::NonFinite("draw standardization"))?;
    Ok(solved.transpose())
}

/// Runs the full energy-minimization update starting from `q = prior`.
///
/// Each iteration draws `S` noise vectors (or reuses one fixed set when
/// `fixed_crn` is on), evaluates the energy and its gradients, and takes a
/// natural-gradient step. A step is halved until the candidate stays positive
/// definite and does not raise the energy estimated on the same draws by more
/// than [`DESCENT_TOLERANCE`]; with fixed draws the recorded energies are
/// therefore non-increasing.
///
/// For `alpha = 1` the energy is constant in `q`, so the update instead
/// performs damped moment matching against the self-normalized sample
/// posterior with the same step schedule.
pub fn efkf_update(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &MeasurementModel,
    config: &AlphaConfig,
) -> Result<(GaussianBelief, FilterTrace)> {
    config.validate()?;
    check_dim("model state", model.state_dim(), prior.dim())?;
    model.check_observation(y)?;
    let d = prior.dim();
    let alpha = config.alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Result<DMatrix<f64>> {
        let eps = standard_normal_draws(rng, config.samples, d);
        if config.standardized_draws && config.samples > d {
            standardize_draws(&eps)
        } else {
            Ok(eps)
        }
    };
    let fixed = if config.fixed_crn { Some(draw(&mut rng)?) } else { None };

    let mut q = prior.clone();
    let mut records = Vec::with_capacity(config.iters);
    for i in 0..config.iters {
        let eps = match &fixed {
            Some(e) => e.clone(),
            None => draw(&mut rng)?,
        };
        let rho = config.step_size(i);
        let (energy, next, accepted) = if alpha < 1.0 {
            let report = energy_report(&eps, y, model, &q, prior, alpha)?;
            let energy = report.estimate.value;
            if rho == 0.0 {
                (energy, q.clone(), 0.0)
            } else {
                let g = &report.gradients;
                let (check, baseline) = match &fixed {
                    Some(_) => (eps.clone(), energy),
                    None => {
                        let check = draw(&mut rng)?;
                        let baseline = energy_estimate(&check, y, model, &q, prior, alpha)?.value;
                        (check, baseline)
                    }
                };
                let (next, accepted) = halving_step(&q, &g.mean, &g.cov, rho, |cand| {
                    if kl_divergence(cand, &q)? > MAX_STEP_KL {
                        return Ok(false);
                    }
                    Ok(match energy_estimate(&check, y, model, cand, prior, alpha) {
                        Ok(e) => e.value <= baseline + DESCENT_TOLERANCE,
                        Err(FilterError::NonFinite(_)) => false,
                        Err(e) => return Err(e),
                    })
                })?;
                (energy, next, accepted)
            }
        } else {
            moment_matching_step(&eps, y, model, &q, prior, rho)?
        };
        records.push(IterationRecord {
            energy,
            mean: q.mean().clone(),
            cov: q.cov().clone(),
            step_size: accepted,
        });
        q = next;
    }
    Ok((
        q.clone(),
        FilterTrace {
            records,
            posterior: q,
        },
    ))
}

fn moment_matching_step(
    eps: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    prior: &GaussianBelief,
    rho: f64,
) -> Result<(f64, GaussianBelief, f64)> {
    check_inputs(eps, y, model, q, prior, 1.0)?;
    let frame = Frame::new(q, prior)?;
    let samples = draw_samples(eps, y, model, q, &frame, 1.0)?;
    let est = energy_from_psi(&samples.psi, frame.log_z0, frame.log_zq, 1.0)?;
    if rho == 0.0 {
        return Ok((est.value, q.clone(), 0.0));
    }
    let (m, c) = weighted_moments(&samples.xs, &est.weights);
    let mut step = rho.min(1.0);
    for _ in 0..=MAX_HALVINGS {
        let mean = q.mean() + (&m - q.mean()) * step;
        let cov = q.cov() + (&c - q.cov()) * step;
        if let Ok(next) = GaussianBelief::new(mean, cov) {
            return Ok((est.value, next, step));
        }
        step *= 0.5;
    }
    Err(FilterError::StepFailed {
        halvings: MAX_HALVINGS,
    })
}

fn weighted_moments(xs: &[DVector<f64>], w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = xs[0].len();
    let mut m = DVector::<f64>::zeros(d);
    for (x, wi) in xs.iter().zip(w.iter()) {
        m.axpy(*wi, x, 1.0);
    }
    let mut c = DMatrix::<f64>::zeros(d, d);
    for (x, wi) in xs.iter().zip(w.iter()) {
        let dx = x - &m;
        c.ger(*wi, &dx, &dx, 1.0);
    }
    (m, symmetrize(&c))
}

/// Moments of the tilted distribution `p~ ∝ p(x|y)^alpha q(x)^(1-alpha)`.
#[derive(Debug, Clone)]
pub struct TiltedMoments {
    pub moments: GaussianBelief,
    pub ess: f64,
    pub mean_std_error: DVector<f64>,
    pub cov_std_error: DMatrix<f64>,
}

/// Self-normalized importance-sampling estimate of the tilted moments with
/// proposal `q` and log-weights `alpha [log p0(x) + log p(y|x) - log q(x)]`.
pub fn tilted_moments_snis<R: Rng + ?Sized>(
    q: &GaussianBelief,
    y: &DVector<f64>,
    model: &MeasurementModel,
    prior: &GaussianBelief,
    alpha: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<TiltedMoments> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(FilterError::InvalidConfig(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if n_samples < 100 {
        return Err(FilterError::InvalidConfig(format!(
            "at least 100 samples are required, got {n_samples}"
        )));
    }
    check_dim("prior vs approximation", q.dim(), prior.dim())?;
    check_dim("model state", model.state_dim(), q.dim())?;
    model.check_observation(y)?;
    let d = q.dim();
    let lower = q.cholesky().lower();
    let mut xs = Vec::with_capacity(n_samples);
    let mut logw = DVector::<f64>::zeros(n_samples);
    for n in 0..n_samples {
        let e = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
        let x = lower * e + q.mean();
        let lw = alpha
            * (prior.log_density(&x)? + model.log_likelihood(y, &x) - q.log_density(&x)?);
        if lw.is_nan() {
            return Err(FilterError::NonFinite("importance weight"));
        }
        logw[n] = lw;
        xs.push(x);
    }
    let max = logw.max();
    let mut w = logw.map(|v| (v - max).exp());
    w /= w.sum();
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    if ess < 10.0 {
        return Err(FilterError::DegenerateWeights { ess });
    }
    let (m, c) = weighted_moments(&xs, &w);
    let mut mean_var = DVector::<f64>::zeros(d);
    let mut cov_var = DMatrix::<f64>::zeros(d, d);
    for (x, wi) in xs.iter().zip(w.iter()) {
        let dx = x - &m;
        let w2 = wi * wi;
        for i in 0..d {
            mean_var[i] += w2 * dx[i] * dx[i];
            for j in 0..d {
                cov_var[(i, j)] += w2 * (dx[i] * dx[j] - c[(i, j)]).powi(2);
            }
        }
    }
    Ok(TiltedMoments {
        moments: GaussianBelief::new_jittered(m, c)?,
        ess,
        mean_std_error: mean_var.map(f64::sqrt),
        cov_std_error: cov_var.map(f64::sqrt),
    })
}

/// Linear-Gaussian prediction `N(F mu, F Sigma F^T + Q)`.
pub fn predict(posterior: &GaussianBelief, f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<GaussianBelief> {
    let d = posterior.dim();
    check_dim("transition rows", d, f.nrows())?;
    check_dim("transition cols", d, f.ncols())?;
    check_dim("process noise rows", d, q.nrows())?;
    check_dim("process noise cols", d, q.ncols())?;
    let mean = f * posterior.mean();
    let cov = f * posterior.cov() * f.transpose() + q;
    GaussianBelief::new_jittered(mean, cov)
}
