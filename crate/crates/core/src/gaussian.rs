//! Gaussian algebra in canonical and natural parameterizations.
//!
//! A [`GaussianBelief`] stores `(mean, cov)` together with the Cholesky factor
//! of `cov`, computed once at construction. Precision matrices are obtained by
//! triangular solves against that factor and are never formed by a general
//! matrix inverse.
//!
//! The log-partition used throughout is
//!
//! ```text
//! log Z(mu, Sigma) = 1/2 mu^T Sigma^-1 mu + 1/2 log |Sigma|
//! ```
//!
//! which drops the `d/2 log 2pi` constant; every quantity built from it only
//! uses differences of log-partitions, where the constant cancels.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, FilterError, Result};

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Returns `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Lower-triangular Cholesky factor `L` with `L L^T = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

/// Factorizes a symmetric positive-definite matrix. Only the lower triangle is read.
pub fn cholesky(cov: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = cov.nrows();
    check_dim("cholesky (square)", n, cov.ncols())?;
    if n == 0 {
        return Err(FilterError::InvalidConfig(
            "cannot factorize an empty matrix".into(),
        ));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = cov[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(FilterError::NotPositiveDefinite {
                index: j,
                pivot: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = cov[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(CholeskyFactor { lower: l })
}

/// Factorizes `cov`, adding `delta * I` when the plain factorization fails.
///
/// `delta` starts at 1e-10 and doubles while it stays at or below 1e-6; past
/// that the original error is returned. The jitter actually applied is
/// returned alongside the factor (0.0 when none was needed).
pub fn cholesky_jittered(cov: &DMatrix<f64>) -> Result<(CholeskyFactor, f64)> {
    let first = match cholesky(cov) {
        Ok(f) => return Ok((f, 0.0)),
        Err(e) => e,
    };
    if matches!(first, FilterError::DimensionMismatch { .. }) {
        return Err(first);
    }
    let n = cov.nrows();
    let mut delta = JITTER_START;
    while delta <= JITTER_MAX {
        let jittered = cov + DMatrix::<f64>::identity(n, n) * delta;
        if let Ok(f) = cholesky(&jittered) {
            log::warn!("covariance factorized after adding jitter {delta:e}");
            return Ok((f, delta));
        }
        delta *= 2.0;
    }
    Err(first)
}

impl CholeskyFactor {
    /// Wraps an existing lower-triangular factor after checking its diagonal.
    pub fn from_lower(lower: DMatrix<f64>) -> Result<Self> {
        check_dim("cholesky factor (square)", lower.nrows(), lower.ncols())?;
        for i in 0..lower.nrows() {
            let v = lower[(i, i)];
            if !(v > 0.0) {
                return Err(FilterError::NotPositiveDefinite { index: i, pivot: v });
            }
        }
        Ok(Self {
            lower: lower.lower_triangle(),
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            lower: DMatrix::identity(d, d),
        }
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `L^-1 b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("factor has a positive diagonal")
    }

    /// `A^-1 b` with `A = L L^T`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let z = self.solve_lower(b);
        self.lower
            .tr_solve_lower_triangular(&z)
            .expect("factor has a positive diagonal")
    }

    /// `A^-1 B` with `A = L L^T`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self
            .lower
            .solve_lower_triangular(b)
            .expect("factor has a positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&z)
            .expect("factor has a positive diagonal")
    }

    /// `L^-1`, lower triangular.
    pub fn lower_inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.lower
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("factor has a positive diagonal")
    }

    /// `A^-1`, obtained from triangular solves and symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let li = self.lower_inverse();
        symmetrize(&(li.transpose() * li))
    }

    /// Squared Mahalanobis norm `b^T A^-1 b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        self.solve_lower(b).norm_squared()
    }
}

/// Multivariate normal in canonical form.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: CholeskyFactor,
}

impl GaussianBelief {
    /// Builds a belief, symmetrizing `cov` and requiring it to be positive definite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("belief covariance rows", mean.len(), cov.nrows())?;
        check_dim("belief covariance cols", mean.len(), cov.ncols())?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("belief parameters"));
        }
        let cov = symmetrize(&cov);
        let chol = cholesky(&cov)?;
        Ok(Self { mean, cov, chol })
    }

    /// Like [`GaussianBelief::new`] but falls back to [`cholesky_jittered`];
    /// the stored covariance includes any jitter that was added.
    pub fn new_jittered(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("belief covariance rows", mean.len(), cov.nrows())?;
        check_dim("belief covariance cols", mean.len(), cov.ncols())?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("belief parameters"));
        }
        let mut cov = symmetrize(&cov);
        let (chol, delta) = cholesky_jittered(&cov)?;
        if delta > 0.0 {
            for i in 0..cov.nrows() {
                cov[(i, i)] += delta;
            }
        }
        Ok(Self { mean, cov, chol })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
            chol: CholeskyFactor::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cholesky(&self) -> &CholeskyFactor {
        &self.chol
    }

    /// `Sigma^-1`.
    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `1/2 mu^T Sigma^-1 mu + 1/2 log |Sigma|`.
    pub fn log_partition(&self) -> f64 {
        0.5 * self.chol.quad_form(&self.mean) + 0.5 * self.chol.log_det()
    }

    /// Gradients of [`GaussianBelief::log_partition`] with respect to the mean
    /// and the (symmetric) covariance.
    pub fn log_partition_gradients(&self) -> (DVector<f64>, DMatrix<f64>) {
        let lam = self.precision();
        let lam_mu = &lam * &self.mean;
        let grad_cov = (&lam - &lam_mu * lam_mu.transpose()) * 0.5;
        (lam_mu, symmetrize(&grad_cov))
    }

    /// Exact multivariate normal log-density.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("log_density point", self.dim(), x.len())?;
        let diff = x - &self.mean;
        Ok(-0.5
            * (self.dim() as f64 * LN_2PI + self.chol.log_det() + self.chol.quad_form(&diff)))
    }

    pub fn to_natural(&self) -> NaturalParams {
        let precision = self.precision();
        let eta = self.chol.solve(&self.mean);
        NaturalParams { eta, precision }
    }
}

/// Natural parameters `(Lambda mu, Lambda)` of a Gaussian.
///
/// Differences of two natural parameter sets (the cavity parameter) are
/// represented by the same type, so the precision is not required to be
/// positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub eta: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl NaturalParams {
    pub fn new(eta: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        check_dim("natural precision rows", eta.len(), precision.nrows())?;
        check_dim("natural precision cols", eta.len(), precision.ncols())?;
        Ok(Self {
            eta,
            precision: symmetrize(&precision),
        })
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    /// Converts back to canonical form; requires a positive-definite precision.
    pub fn to_canonical(&self) -> Result<GaussianBelief> {
        let pchol = cholesky(&self.precision)?;
        let mean = pchol.solve(&self.eta);
        let cov = pchol.inverse();
        GaussianBelief::new(mean, cov)
    }

    /// `self - other`.
    pub fn difference(&self, other: &NaturalParams) -> Result<NaturalParams> {
        check_dim("natural parameter difference", self.dim(), other.dim())?;
        Ok(NaturalParams {
            eta: &self.eta - &other.eta,
            precision: &self.precision - &other.precision,
        })
    }

    /// `lambda^T s(x)` with `s(x) = [x, vec(x x^T)]`, i.e. `eta^T x - 1/2 x^T P x`.
    pub fn dot_statistics(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("sufficient statistics", self.dim(), x.len())?;
        Ok(self.eta.dot(x) - 0.5 * x.dot(&(&self.precision * x)))
    }
}

/// Log of the cavity factor `f(x) = exp{(lambda_q - lambda_0)^T s(x)}`.
pub fn cavity_log_f(x: &DVector<f64>, q: &NaturalParams, prior: &NaturalParams) -> Result<f64> {
    q.difference(prior)?.dot_statistics(x)
}

/// Reparametrized sample `C eps + mean`.
pub fn sample_reparam(
    mean: &DVector<f64>,
    factor: &CholeskyFactor,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("reparam factor", mean.len(), factor.dim())?;
    check_dim("reparam noise", mean.len(), eps.len())?;
    Ok(factor.lower() * eps + mean)
}

/// `KL[p || q]` between two Gaussians.
pub fn kl_divergence(p: &GaussianBelief, q: &GaussianBelief) -> Result<f64> {
    check_dim("kl divergence", p.dim(), q.dim())?;
    let qc = q.cholesky();
    let trace = qc.solve_matrix(p.cov()).trace();
    let maha = qc.quad_form(&(q.mean() - p.mean()));
    let kl = 0.5 * (trace + maha - p.dim() as f64 + qc.log_det() - p.cholesky().log_det());
    Ok(kl.max(0.0))
}

/// Closed-form alpha divergence `D_alpha[p || q]` between two Gaussians.
///
/// Uses `int p^a q^(1-a) = exp{A(a l_p + (1-a) l_q) - a A(l_p) - (1-a) A(l_q)}`
/// where `A` is the log-partition in natural coordinates.
pub fn alpha_divergence_gaussian(
    p: &GaussianBelief,
    q: &GaussianBelief,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FilterError::InvalidConfig(format!(
            "alpha divergence requires 0 < alpha < 1, got {alpha}"
        )));
    }
    check_dim("alpha divergence", p.dim(), q.dim())?;
    let np = p.to_natural();
    let nq = q.to_natural();
    let eta = &np.eta * alpha + &nq.eta * (1.0 - alpha);
    let prec = symmetrize(&(&np.precision * alpha + &nq.precision * (1.0 - alpha)));
    let bchol = cholesky(&prec).map_err(|_| FilterError::BlendNotPositiveDefinite)?;
    // A(eta, P) = 1/2 eta^T P^-1 eta - 1/2 log|P|; log|P| = -log|Sigma| for p and q.
    let a_blend = 0.5 * bchol.quad_form(&eta) - 0.5 * bchol.log_det();
    let log_integral = a_blend - alpha * p.log_partition() - (1.0 - alpha) * q.log_partition();
    let d = -log_integral.exp_m1() / (alpha * (1.0 - alpha));
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.norm()
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let c = cholesky(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(c.lower(), &DMatrix::<f64>::identity(2, 2));
        let c = cholesky(&dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        assert_eq!(c.lower(), &dmatrix![2.0, 0.0; 0.0, 3.0]);
    }

    #[test]
    fn cholesky_reconstructs_correlated() {
        let a = dmatrix![2.0, 1.0; 1.0, 2.0];
        let c = cholesky(&a).unwrap();
        assert_eq!(c.lower()[(0, 1)], 0.0);
        assert!(frob(&(c.reconstruct() - &a)) / frob(&a) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let err = cholesky(&dmatrix![1.0, 2.0; 2.0, 1.0]).unwrap_err();
        assert!(matches!(err, FilterError::NotPositiveDefinite { index: 1, .. }));
        assert!(matches!(
            cholesky(&DMatrix::zeros(2, 3)),
            Err(FilterError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn jitter_recovers_singular_psd() {
        let a = dmatrix![1.0, 1.0; 1.0, 1.0];
        assert!(cholesky(&a).is_err());
        let (c, delta) = cholesky_jittered(&a).unwrap();
        assert!(delta >= 1e-10 && delta <= 1e-6);
        assert!(frob(&(c.reconstruct() - &a)) < 1e-5);
        // Far from PD: jitter is bounded, error propagates.
        assert!(cholesky_jittered(&dmatrix![1.0, 0.0; 0.0, -1.0]).is_err());
    }

    #[test]
    fn constructor_symmetrizes() {
        let b = GaussianBelief::new(dvector![0.0, 0.0], dmatrix![2.0, 1.0 + 1e-9; 1.0, 2.0])
            .unwrap();
        let c = b.cov();
        assert_eq!(c[(0, 1)], c[(1, 0)]);
    }

    #[test]
    fn log_partition_examples() {
        let b = GaussianBelief::new(dvector![0.0], dmatrix![1.0]).unwrap();
        assert_eq!(b.log_partition(), 0.0);
        let b = GaussianBelief::new(dvector![2.0], dmatrix![1.0]).unwrap();
        assert!((b.log_partition() - 2.0).abs() < 1e-15);
        // Explicit 2x2 inverse: [[2,1],[1,2]]^-1 = [[2,-1],[-1,2]]/3, det = 3.
        let b = GaussianBelief::new(dvector![1.0, 1.0], dmatrix![2.0, 1.0; 1.0, 2.0]).unwrap();
        let quad = (2.0 - 1.0 - 1.0 + 2.0) / 3.0;
        let expected = 0.5 * quad + 0.5 * 3.0f64.ln();
        assert!((b.log_partition() - expected).abs() < 1e-14);
    }

    #[test]
    fn log_partition_gradient_examples() {
        let b = GaussianBelief::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let (gm, gc) = b.log_partition_gradients();
        assert_eq!(gm[0], 0.0);
        assert!((gc[(0, 0)] - 0.5).abs() < 1e-15);
        let b = GaussianBelief::new(dvector![2.0], dmatrix![1.0]).unwrap();
        assert!((b.log_partition_gradients().0[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn log_density_standard_normal() {
        let b = GaussianBelief::standard(1);
        assert!((b.log_density(&dvector![0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let b = GaussianBelief::standard(2);
        assert!((b.log_density(&dvector![0.0, 0.0]).unwrap() + 1.837_877_066_409_345_5).abs() < 1e-12);
    }

    #[test]
    fn cavity_examples() {
        let prior = GaussianBelief::standard(1).to_natural();
        let q = GaussianBelief::new(dvector![0.0], dmatrix![0.5])
            .unwrap()
            .to_natural();
        assert!((cavity_log_f(&dvector![2.0], &q, &prior).unwrap() + 2.0).abs() < 1e-12);
        assert_eq!(cavity_log_f(&dvector![3.0], &prior, &prior).unwrap(), 0.0);
    }

    #[test]
    fn sample_reparam_examples() {
        let mean = dvector![1.5, -2.0];
        let f = cholesky(&dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        assert_eq!(sample_reparam(&mean, &f, &dvector![0.0, 0.0]).unwrap(), mean);
        let x = sample_reparam(&dvector![0.0, 0.0], &CholeskyFactor::identity(2), &dvector![1.0, -1.0])
            .unwrap();
        assert_eq!(x, dvector![1.0, -1.0]);
        assert!(sample_reparam(&mean, &f, &dvector![0.0]).is_err());
    }

    #[test]
    fn alpha_divergence_identical_is_zero_and_half_symmetric() {
        let p = GaussianBelief::new(dvector![0.3, -1.0], dmatrix![1.2, 0.4; 0.4, 0.9]).unwrap();
        let q = GaussianBelief::new(dvector![1.0, 0.5], dmatrix![0.7, -0.1; -0.1, 2.0]).unwrap();
        assert!(alpha_divergence_gaussian(&p, &p, 0.3).unwrap().abs() < 1e-12);
        let a = alpha_divergence_gaussian(&p, &q, 0.5).unwrap();
        let b = alpha_divergence_gaussian(&q, &p, 0.5).unwrap();
        assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        assert!(a > 0.0);
        assert!(alpha_divergence_gaussian(&p, &q, 1.0).is_err());
    }
}
