//! Nonlinear measurement model `y = h(x) + v`, `v ~ N(0, R)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, FilterError, Result};
use crate::gaussian::{cholesky, symmetrize, CholeskyFactor, LN_2PI};

pub type ObservationFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
pub type JacobianFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Observation function, its Jacobian and the additive noise covariance.
#[derive(Clone)]
pub struct MeasurementModel {
    state_dim: usize,
    obs_dim: usize,
    h: Arc<ObservationFn>,
    jacobian: Arc<JacobianFn>,
    noise_cov: DMatrix<f64>,
    noise_chol: CholeskyFactor,
}

impl fmt::Debug for MeasurementModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasurementModel")
            .field("state_dim", &self.state_dim)
            .field("obs_dim", &self.obs_dim)
            .field("noise_cov", &self.noise_cov)
            .finish_non_exhaustive()
    }
}

impl MeasurementModel {
    pub fn new(
        state_dim: usize,
        obs_dim: usize,
        h: Arc<ObservationFn>,
        jacobian: Arc<JacobianFn>,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        check_dim("noise covariance rows", obs_dim, noise_cov.nrows())?;
        check_dim("noise covariance cols", obs_dim, noise_cov.ncols())?;
        let noise_cov = symmetrize(&noise_cov);
        let noise_chol = cholesky(&noise_cov)?;
        Ok(Self {
            state_dim,
            obs_dim,
            h,
            jacobian,
            noise_cov,
            noise_chol,
        })
    }

    /// `h(x) = H x`.
    pub fn linear(h_matrix: DMatrix<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let (m, d) = h_matrix.shape();
        let hm = Arc::new(h_matrix);
        let hj = Arc::clone(&hm);
        Self::new(
            d,
            m,
            Arc::new(move |x: &DVector<f64>| &*hm * x),
            Arc::new(move |_: &DVector<f64>| (*hj).clone()),
            noise_cov,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn noise_cholesky(&self) -> &CholeskyFactor {
        &self.noise_chol
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.h)(x)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(x)
    }

    /// `log N(y; h(x), R)`.
    pub fn log_likelihood(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let r = y - self.eval(x);
        self.log_likelihood_residual(&r)
    }

    pub(crate) fn log_likelihood_residual(&self, r: &DVector<f64>) -> f64 {
        -0.5 * (self.obs_dim as f64 * LN_2PI
            + self.noise_chol.log_det()
            + self.noise_chol.quad_form(r))
    }

    pub(crate) fn check_observation(&self, y: &DVector<f64>) -> Result<()> {
        check_dim("observation", self.obs_dim, y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("observation"));
        }
        Ok(())
    }

    /// Largest relative deviation between the analytic Jacobian and central
    /// finite differences of `h` at `x`.
    pub fn jacobian_fd_error(&self, x: &DVector<f64>, step: f64) -> f64 {
        let analytic = self.jacobian(x);
        let mut fd = DMatrix::<f64>::zeros(self.obs_dim, self.state_dim);
        for j in 0..self.state_dim {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let col = (self.eval(&xp) - self.eval(&xm)) / (2.0 * step);
            fd.set_column(j, &col);
        }
        (analytic - &fd).norm() / fd.norm().max(1e-12)
    }
}
