//! Reference filters: exact Kalman, EKF, UKF, bootstrap particle filter and
//! stochastic (perturbed-observation) ensemble Kalman filter.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, FilterError, Result};
use crate::gaussian::{cholesky, cholesky_jittered, symmetrize, GaussianBelief};
use crate::model::MeasurementModel;

// Gaussian conditioning given the innovation, state/measurement cross
// covariance and innovation covariance.
fn condition(
    prior: &GaussianBelief,
    innovation: &DVector<f64>,
    cross_cov: &DMatrix<f64>,
    innov_cov: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let (schol, _) = cholesky_jittered(&symmetrize(innov_cov))?;
    // K^T = S^-1 P_xy^T
    let gain_t = schol.solve_matrix(&cross_cov.transpose());
    let mean = prior.mean() + gain_t.transpose() * innovation;
    let cov = prior.cov() - cross_cov * &gain_t;
    GaussianBelief::new_jittered(mean, cov)
}

/// Exact conjugate update for `y = H x + v`, `v ~ N(0, R)`.
pub fn kalman_update(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    check_dim("observation matrix cols", prior.dim(), h.ncols())?;
    check_dim("observation", h.nrows(), y.len())?;
    check_dim("noise covariance rows", h.nrows(), r.nrows())?;
    check_dim("noise covariance cols", h.nrows(), r.ncols())?;
    cholesky(&symmetrize(r))?;
    let cross = prior.cov() * h.transpose();
    let s = h * &cross + r;
    let innovation = y - h * prior.mean();
    condition(prior, &innovation, &cross, &s)
}

/// Extended Kalman filter update, linearized at the prior mean.
pub fn ekf_update(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &MeasurementModel,
) -> Result<GaussianBelief> {
    check_dim("model state", model.state_dim(), prior.dim())?;
    model.check_observation(y)?;
    let jac = model.jacobian(prior.mean());
    let cross = prior.cov() * jac.transpose();
    let s = &jac * &cross + model.noise_cov();
    let innovation = y - model.eval(prior.mean());
    condition(prior, &innovation, &cross, &s)
}

/// Scaled unscented-transform constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfParams {
    pub spread: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl UkfParams {
    /// `spread = 0.5`, `beta = 2`, `kappa = 3 - d`.
    pub fn scaled(d: usize) -> Self {
        Self {
            spread: 0.5,
            beta: 2.0,
            kappa: 3.0 - d as f64,
        }
    }

    pub fn lambda(&self, d: usize) -> f64 {
        self.spread * self.spread * (d as f64 + self.kappa) - d as f64
    }
}

/// Sigma points with their mean and covariance weights.
#[derive(Debug, Clone)]
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

pub fn sigma_points(belief: &GaussianBelief, params: &UkfParams) -> Result<SigmaPoints> {
    let d = belief.dim();
    let lambda = params.lambda(d);
    let scale = d as f64 + lambda;
    if !(scale > 0.0) || !(params.spread > 0.0) {
        return Err(FilterError::InvalidConfig(format!(
            "unscented scaling d + lambda = {scale} must be positive"
        )));
    }
    let gamma = scale.sqrt();
    let lower = belief.cholesky().lower();
    let mu = belief.mean();
    let mut points = Vec::with_capacity(2 * d + 1);
    points.push(mu.clone());
    for i in 0..d {
        points.push(mu + lower.column(i) * gamma);
    }
    for i in 0..d {
        points.push(mu - lower.column(i) * gamma);
    }
    let wi = 0.5 / scale;
    let w0 = lambda / scale;
    let mut mean_weights = vec![wi; 2 * d + 1];
    let mut cov_weights = vec![wi; 2 * d + 1];
    mean_weights[0] = w0;
    cov_weights[0] = w0 + 1.0 - params.spread * params.spread + params.beta;
    Ok(SigmaPoints {
        points,
        mean_weights,
        cov_weights,
    })
}

/// Result of pushing sigma points through the measurement function.
#[derive(Debug, Clone)]
pub struct UnscentedMeasurement {
    pub mean: DVector<f64>,
    pub innov_cov: DMatrix<f64>,
    pub cross_cov: DMatrix<f64>,
}

pub fn unscented_measurement(
    prior: &GaussianBelief,
    model: &MeasurementModel,
    params: &UkfParams,
) -> Result<UnscentedMeasurement> {
    check_dim("model state", model.state_dim(), prior.dim())?;
    let sp = sigma_points(prior, params)?;
    let m = model.obs_dim();
    let d = prior.dim();
    let ys: Vec<DVector<f64>> = sp.points.iter().map(|p| model.eval(p)).collect();
    let mut mean = DVector::<f64>::zeros(m);
    for (yi, w) in ys.iter().zip(&sp.mean_weights) {
        mean.axpy(*w, yi, 1.0);
    }
    let mut innov = model.noise_cov().clone();
    let mut cross = DMatrix::<f64>::zeros(d, m);
    for ((yi, xi), w) in ys.iter().zip(&sp.points).zip(&sp.cov_weights) {
        let dy = yi - &mean;
        let dx = xi - prior.mean();
        innov.ger(*w, &dy, &dy, 1.0);
        cross.ger(*w, &dx, &dy, 1.0);
    }
    Ok(UnscentedMeasurement {
        mean,
        innov_cov: symmetrize(&innov),
        cross_cov: cross,
    })
}

/// Unscented Kalman filter update with `2d + 1` sigma points.
pub fn ukf_update(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &MeasurementModel,
    params: &UkfParams,
) -> Result<GaussianBelief> {
    model.check_observation(y)?;
    let ut = unscented_measurement(prior, model, params)?;
    let innovation = y - &ut.mean;
    condition(prior, &innovation, &ut.cross_cov, &ut.innov_cov)
}

/// Square-root factor `L` with `L L^T = A` for a symmetric PSD matrix.
///
/// Falls back to a clamped eigendecomposition when `A` is singular.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("psd factor (square)", a.nrows(), a.ncols())?;
    let a = symmetrize(a);
    if let Ok(c) = cholesky(&a) {
        return Ok(c.lower().clone());
    }
    let eig = SymmetricEigen::new(a);
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
        return Err(FilterError::NotPositiveDefinite {
            index: 0,
            pivot: eig.eigenvalues.min(),
        });
    }
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Pushes each row through `x <- F x + w`, `w ~ N(0, Q)`.
pub fn propagate_ensemble<R: Rng + ?Sized>(
    states: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = states.ncols();
    check_dim("transition rows", d, f.nrows())?;
    check_dim("transition cols", d, f.ncols())?;
    check_dim("process noise", d, q.nrows())?;
    let lq = psd_factor(q)?;
    let mut out = DMatrix::<f64>::zeros(states.nrows(), d);
    for i in 0..states.nrows() {
        let x: DVector<f64> = states.row(i).transpose();
        let next = f * x + &lq * standard_normal_vec(rng, d);
        out.set_row(i, &next.transpose());
    }
    Ok(out)
}

/// Weighted particle set; particles are stored one per row.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    particles: DMatrix<f64>,
    weights: DVector<f64>,
}

impl ParticleEnsemble {
    pub fn new(particles: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        check_dim("particle weights", particles.nrows(), weights.len())?;
        if particles.nrows() == 0 {
            return Err(FilterError::InvalidConfig("ensemble needs at least one particle".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(FilterError::AllWeightsZero);
        }
        let total = weights.sum();
        if !(total > 0.0) {
            return Err(FilterError::AllWeightsZero);
        }
        Ok(Self {
            particles,
            weights: weights / total,
        })
    }

    pub fn uniform(particles: DMatrix<f64>) -> Result<Self> {
        let n = particles.nrows();
        Self::new(particles, DVector::from_element(n, 1.0 / n.max(1) as f64))
    }

    pub fn from_belief<R: Rng + ?Sized>(belief: &GaussianBelief, n: usize, rng: &mut R) -> Result<Self> {
        Self::uniform(sample_belief(belief, n, rng))
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.nrows() == 0
    }

    pub fn mean(&self) -> DVector<f64> {
        self.particles.tr_mul(&self.weights)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut c = DMatrix::<f64>::zeros(m.len(), m.len());
        for i in 0..self.len() {
            let dx = self.particles.row(i).transpose() - &m;
            c.ger(self.weights[i], &dx, &dx, 1.0);
        }
        symmetrize(&c)
    }

    /// Effective sample size `1 / sum w_i^2`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.norm_squared()
    }
}

/// Draws `n` rows from a Gaussian.
pub fn sample_belief<R: Rng + ?Sized>(belief: &GaussianBelief, n: usize, rng: &mut R) -> DMatrix<f64> {
    let d = belief.dim();
    let lower = belief.cholesky().lower();
    let mut out = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        let x = lower * standard_normal_vec(rng, d) + belief.mean();
        out.set_row(i, &x.transpose());
    }
    out
}

/// Systematic resampling with a single uniform `offset` in `[0, 1)`.
///
/// Returns the selected ancestor index for each of the `N` output slots.
pub fn systematic_resample(weights: &DVector<f64>, offset: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut idx = 0;
    for k in 0..n {
        let position = (offset + k as f64) / n as f64;
        while position >= cumulative && idx + 1 < n {
            idx += 1;
            cumulative += weights[idx];
        }
        out.push(idx);
    }
    out
}

/// One bootstrap particle filter step: propagate through the transition,
/// weight by the likelihood and resample systematically when ESS < N/2.
pub fn pf_step<R: Rng + ?Sized>(
    ensemble: &ParticleEnsemble,
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    model: &MeasurementModel,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    check_dim("model state", model.state_dim(), ensemble.particles.ncols())?;
    model.check_observation(y)?;
    let n = ensemble.len();
    let particles = propagate_ensemble(&ensemble.particles, f, q, rng)?;
    let mut logw = DVector::<f64>::zeros(n);
    for i in 0..n {
        let x: DVector<f64> = particles.row(i).transpose();
        logw[i] = ensemble.weights[i].ln() + model.log_likelihood(y, &x);
    }
    if logw.iter().any(|v| v.is_nan()) {
        return Err(FilterError::AllWeightsZero);
    }
    let max = logw.max();
    if !max.is_finite() {
        return Err(FilterError::AllWeightsZero);
    }
    let weights = logw.map(|v| (v - max).exp());
    let updated = ParticleEnsemble::new(particles, weights)?;
    if updated.ess() < n as f64 / 2.0 {
        let offset: f64 = rng.random();
        let idx = systematic_resample(&updated.weights, offset);
        let d = updated.particles.ncols();
        let mut resampled = DMatrix::<f64>::zeros(n, d);
        for (k, &i) in idx.iter().enumerate() {
            resampled.set_row(k, &updated.particles.row(i));
        }
        ParticleEnsemble::uniform(resampled)
    } else {
        Ok(updated)
    }
}

/// Stochastic EnKF analysis with observation perturbations drawn from `R`.
pub fn enkf_update<R: Rng + ?Sized>(
    states: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &MeasurementModel,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    enkf_update_with_perturbation(states, y, model, model.noise_cov(), rng)
}

/// EnKF analysis with an explicit (PSD) perturbation covariance.
///
/// The innovation covariance is the sample covariance of the perturbed
/// predicted observations `h(x_i) + v_i`; it must have full rank.
pub fn enkf_update_with_perturbation<R: Rng + ?Sized>(
    states: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &MeasurementModel,
    perturbation_cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (n, d) = states.shape();
    check_dim("model state", model.state_dim(), d)?;
    model.check_observation(y)?;
    if n < 2 {
        return Err(FilterError::InvalidConfig("EnKF needs at least two members".into()));
    }
    let m = model.obs_dim();
    let lv = psd_factor(perturbation_cov)?;
    let mut predicted = DMatrix::<f64>::zeros(n, m);
    for i in 0..n {
        let x: DVector<f64> = states.row(i).transpose();
        let yi = model.eval(&x) + &lv * standard_normal_vec(rng, m);
        predicted.set_row(i, &yi.transpose());
    }
    let x_mean = states.row_mean();
    let y_mean = predicted.row_mean();
    let mut xa = states.clone();
    let mut ya = predicted.clone();
    for i in 0..n {
        let mut r = xa.row_mut(i);
        r -= &x_mean;
        let mut r = ya.row_mut(i);
        r -= &y_mean;
    }
    let denom = (n - 1) as f64;
    let cross = xa.tr_mul(&ya) / denom;
    let innov = symmetrize(&(ya.tr_mul(&ya) / denom));

    let eig = SymmetricEigen::new(innov.clone());
    let top = eig.eigenvalues.max();
    if !(top > 0.0) || eig.eigenvalues.min() <= 1e-12 * top {
        return Err(FilterError::SingularEnsemble);
    }
    let (schol, _) = cholesky_jittered(&innov).map_err(|_| FilterError::SingularEnsemble)?;
    let gain_t = schol.solve_matrix(&cross.transpose());
    let mut out = states.clone();
    for i in 0..n {
        let innovation = y - predicted.row(i).transpose();
        let delta = gain_t.tr_mul(&innovation);
        let mut r = out.row_mut(i);
        r += delta.transpose();
    }
    Ok(out)
}

pub fn ensemble_mean(states: &DMatrix<f64>) -> DVector<f64> {
    states.row_mean().transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kalman_scalar_and_uninformative() {
        let prior = GaussianBelief::standard(1);
        let post = kalman_update(&prior, &dvector![2.0], &dmatrix![1.0], &dmatrix![1.0]).unwrap();
        assert!((post.mean()[0] - 1.0).abs() < 1e-15);
        assert!((post.cov()[(0, 0)] - 0.5).abs() < 1e-15);

        let prior = GaussianBelief::new(dvector![1.0, -1.0], dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
        let post = kalman_update(&prior, &dvector![3.0], &dmatrix![0.0, 0.0], &dmatrix![1.0]).unwrap();
        assert_eq!(post.mean(), prior.mean());
        assert_eq!(post.cov(), prior.cov());
    }

    #[test]
    fn ukf_quadratic_mean_is_exact() {
        let prior = GaussianBelief::new(dvector![1.3], dmatrix![0.7]).unwrap();
        let model = MeasurementModel::new(
            1,
            1,
            std::sync::Arc::new(|x: &DVector<f64>| dvector![x[0] * x[0]]),
            std::sync::Arc::new(|x: &DVector<f64>| dmatrix![2.0 * x[0]]),
            dmatrix![1.0],
        )
        .unwrap();
        let ut = unscented_measurement(&prior, &model, &UkfParams::scaled(1)).unwrap();
        assert!((ut.mean[0] - (1.3f64 * 1.3 + 0.7)).abs() < 1e-12);
    }

    #[test]
    fn sigma_point_weights_sum_to_one() {
        for d in 1..6 {
            let sp = sigma_points(&GaussianBelief::standard(d), &UkfParams::scaled(d)).unwrap();
            let s: f64 = sp.mean_weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(sp.points.len(), 2 * d + 1);
        }
    }

    #[test]
    fn systematic_balanced_weights() {
        let w = dvector![0.5, 0.5];
        for off in [0.0, 0.1, 0.5, 0.999_999] {
            assert_eq!(systematic_resample(&w, off), vec![0, 1]);
        }
        let w = dvector![0.0, 1.0, 0.0];
        assert_eq!(systematic_resample(&w, 0.3), vec![1, 1, 1]);
    }

    #[test]
    fn single_particle_keeps_unit_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MeasurementModel::linear(dmatrix![1.0, 0.0], dmatrix![1.0]).unwrap();
        let ens = ParticleEnsemble::uniform(dmatrix![0.5, 1.0]).unwrap();
        let f = dmatrix![1.0, 1.0; 0.0, 1.0];
        let next = pf_step(&ens, &dvector![0.7], &f, &DMatrix::identity(2, 2), &model, &mut rng).unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(next.weights()[0], 1.0);
        assert_ne!(next.particles(), ens.particles());
    }

    #[test]
    fn enkf_two_identical_members_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = MeasurementModel::linear(
            dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0],
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let states = dmatrix![1.0, 2.0; 1.0, 2.0];
        let err = enkf_update(&states, &dvector![0.0, 0.0, 0.0], &model, &mut rng).unwrap_err();
        assert_eq!(err, FilterError::SingularEnsemble);
    }

    #[test]
    fn enkf_zero_perturbation_applies_deterministic_gain() {
        // d = 2, m = 1, H = [1, 0], no observation perturbation. Members
        // (0, 0), (2, 2), (4, -2): sample var of x1 = 4, cov(x1, x2) = -2, so
        // K = [4, -2] / 4 = [1, -0.5] and every member moves by K (y - x1).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = MeasurementModel::linear(dmatrix![1.0, 0.0], dmatrix![1.0]).unwrap();
        let states = dmatrix![0.0, 0.0; 2.0, 2.0; 4.0, -2.0];
        let out = enkf_update_with_perturbation(&states, &dvector![1.0], &model, &dmatrix![0.0], &mut rng)
            .unwrap();
        let expected = dmatrix![1.0, -0.5; 1.0, 2.5; 1.0, -0.5];
        assert!((out - expected).amax() < 1e-12);
    }

    #[test]
    fn psd_factor_handles_zero() {
        let l = psd_factor(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(l.amax(), 0.0);
        let a = dmatrix![1.0, 1.0; 1.0, 1.0];
        let l = psd_factor(&a).unwrap();
        assert!((&l * l.transpose() - a).amax() < 1e-12);
    }
}
