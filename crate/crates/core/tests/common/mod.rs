#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, ridge: f64) -> DMatrix<f64> {
    let a = normal_mat(rng, d, d);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * ridge
}

/// Textbook Kalman update written with explicit inverses.
pub fn kalman_oracle(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let s = h * sigma * h.transpose() + r;
    let k = sigma * h.transpose() * s.try_inverse().unwrap();
    let mean = mu + &k * (y - h * mu);
    let cov = (DMatrix::identity(mu.len(), mu.len()) - &k * h) * sigma;
    (mean, (&cov + cov.transpose()) * 0.5)
}

/// `log N(y; H mu, H Sigma H^T + R)`.
pub fn log_evidence(mu: &DVector<f64>, sigma: &DMatrix<f64>, y: &DVector<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let s = h * sigma * h.transpose() + r;
    let m = y.len() as f64;
    let diff = y - h * mu;
    let quad = (diff.transpose() * s.clone().try_inverse().unwrap() * &diff)[(0, 0)];
    -0.5 * (m * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + quad)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}
