mod common;

use common::*;
use efkf::energy::{
    efkf_update, energy_estimate, energy_from_psi, energy_gradients, natural_gradient_step, psi_values,
    standardize_draws, tilted_moments_snis, AlphaConfig,
};
use efkf::gaussian::GaussianBelief;
use efkf::model::MeasurementModel;
use efkf::tracking::range_model;
use efkf::FilterError;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};

struct Linear {
    prior: GaussianBelief,
    post: GaussianBelief,
    model: MeasurementModel,
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    y: DVector<f64>,
}

fn linear_problem(seed: u64, d: usize, m: usize) -> Linear {
    let mut g = rng(seed);
    let prior = GaussianBelief::new(normal_vec(&mut g, d), random_spd(&mut g, d, 0.5)).unwrap();
    let h = normal_mat(&mut g, m, d);
    let r = random_spd(&mut g, m, 0.5);
    let y = normal_vec(&mut g, m) * 2.0;
    let (pm, pc) = kalman_oracle(prior.mean(), prior.cov(), &y, &h, &r);
    Linear {
        post: GaussianBelief::new(pm, pc).unwrap(),
        model: MeasurementModel::linear(h.clone(), r.clone()).unwrap(),
        prior,
        h,
        r,
        y,
    }
}

fn range_problem(seed: u64) -> (GaussianBelief, MeasurementModel, DVector<f64>) {
    let mut g = rng(seed);
    let prior = GaussianBelief::new(dvector![1.0, 0.5, -1.0, 1.0], DMatrix::identity(4, 4) * 4.0).unwrap();
    let model = range_model(
        vec![[6.0, 0.0], [-3.0, 5.0], [-3.0, -5.0]],
        DMatrix::identity(3, 3),
        4,
        (0, 2),
    )
    .unwrap();
    let truth = prior.mean() + normal_vec(&mut g, 4);
    let y = model.eval(&truth) + normal_vec(&mut g, 3);
    (prior, model, y)
}

#[test]
fn psi_scalar_example() {
    let model = MeasurementModel::linear(dmatrix![1.0], dmatrix![1.0]).unwrap();
    let p = GaussianBelief::standard(1);
    let psi = psi_values(&DMatrix::zeros(1, 1), &dvector![0.0], &model, &p, &p, 0.5).unwrap();
    assert!((psi[0] + 0.45947).abs() < 1e-5);
    assert!((psi[0] - 0.5 * (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-14);
}

fn log_normal(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let diff = y - mean;
    let quad = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[(0, 0)];
    -0.5 * (y.len() as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad)
}

#[test]
fn psi_matches_naive_density_ratio() {
    let (prior, model, y) = range_problem(3);
    let mut g = rng(4);
    let q = GaussianBelief::new(prior.mean() + normal_vec(&mut g, 4) * 0.5, random_spd(&mut g, 4, 0.5)).unwrap();
    let eps = normal_mat(&mut g, 16, 4);
    let alpha = 0.7;
    let psi = psi_values(&eps, &y, &model, &q, &prior, alpha).unwrap();
    let lq = q.cov().clone().cholesky().unwrap().l();
    let log_z = |b: &GaussianBelief| {
        let inv = b.cov().clone().try_inverse().unwrap();
        0.5 * (b.mean().transpose() * inv * b.mean())[(0, 0)] + 0.5 * b.cov().determinant().ln()
    };
    for s in 0..16 {
        let x = q.mean() + &lq * eps.row(s).transpose();
        let log_f = log_normal(&x, q.mean(), q.cov()) - log_normal(&x, prior.mean(), prior.cov()) + log_z(&q)
            - log_z(&prior);
        let want = alpha * (log_normal(&y, &model.eval(&x), model.noise_cov()) - log_f);
        assert!((psi[s] - want).abs() < 1e-9 * want.abs().max(1.0), "{} vs {want}", psi[s]);
    }

    let psi0 = psi_values(&eps, &y, &model, &prior, &prior, alpha).unwrap();
    let lp = prior.cov().clone().cholesky().unwrap().l();
    for s in 0..16 {
        let x = prior.mean() + &lp * eps.row(s).transpose();
        let want = alpha * log_normal(&y, &model.eval(&x), model.noise_cov());
        assert!((psi0[s] - want).abs() < 1e-10 * want.abs().max(1.0));
    }
}

#[test]
fn energy_shift_invariance() {
    let psi = dvector![-3.2, -1.0, -7.5, -0.4, -2.2];
    let alpha = 0.3;
    let base = energy_from_psi(&psi, 1.0, 0.2, alpha).unwrap();
    for c in [-40.0, 3.5, 250.0] {
        let shifted = energy_from_psi(&psi.add_scalar(c), 1.0, 0.2, alpha).unwrap();
        assert!((shifted.value - (base.value - c / alpha)).abs() < 1e-10 * base.value.abs().max(c.abs()));
        assert!((shifted.weights.clone() - &base.weights).amax() < 1e-14);
    }
    assert!((base.weights.sum() - 1.0).abs() < 1e-12);
    assert!(base.weights.iter().all(|w| *w >= 0.0));
    assert!(matches!(
        energy_from_psi(&dvector![0.0, f64::NAN], 0.0, 0.0, 0.5),
        Err(FilterError::NonFinite(_))
    ));
}

#[test]
fn single_sample_collapse() {
    let (prior, model, y) = range_problem(8);
    let q = GaussianBelief::new(prior.mean() * 0.9, prior.cov() * 0.5).unwrap();
    let eps = normal_mat(&mut rng(9), 1, 4);
    let alpha = 0.4;
    let psi = psi_values(&eps, &y, &model, &q, &prior, alpha).unwrap();
    let e = energy_estimate(&eps, &y, &model, &q, &prior, alpha).unwrap();
    let want = prior.log_partition() - q.log_partition() - psi[0] / alpha;
    assert!((e.value - want).abs() < 1e-12 * want.abs().max(1.0));
    assert_eq!(e.weights[0], 1.0);
}

#[test]
fn energy_at_exact_posterior_is_negative_log_evidence() {
    let lp = linear_problem(21, 4, 3);
    let eps = normal_mat(&mut rng(22), 4000, 4);
    let ev = log_evidence(lp.prior.mean(), lp.prior.cov(), &lp.y, &lp.h, &lp.r);
    for alpha in [0.3, 0.5, 0.9, 1.0] {
        let e = energy_estimate(&eps, &lp.y, &lp.model, &lp.post, &lp.prior, alpha).unwrap();
        assert!(
            (e.value + ev).abs() <= 3.0 * e.std_error + 1e-9,
            "alpha {alpha}: {} vs {}",
            e.value,
            -ev
        );
    }
}

#[test]
fn gradients_vanish_at_exact_posterior() {
    let lp = linear_problem(31, 4, 3);
    let s = 2000;
    let eps = normal_mat(&mut rng(32), s, 4);
    for alpha in [0.3, 0.5, 0.7] {
        let g = energy_gradients(&eps, &lp.y, &lp.model, &lp.post, &lp.prior, alpha).unwrap();
        // Weights are uniform at the exact posterior, so the estimate is the
        // average of single-draw gradients; their spread gives the standard error.
        let singles: Vec<_> = (0..s)
            .map(|i| {
                let row = DMatrix::from_row_slice(1, 4, eps.row(i).transpose().as_slice());
                energy_gradients(&row, &lp.y, &lp.model, &lp.post, &lp.prior, alpha).unwrap()
            })
            .collect();
        for i in 0..4 {
            let v: Vec<f64> = singles.iter().map(|x| x.mean[i]).collect();
            let m = v.iter().sum::<f64>() / s as f64;
            let se = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (s - 1) as f64 / s as f64).sqrt();
            assert!(g.mean[i].abs() <= 3.0 * se, "alpha {alpha} mean[{i}] {} se {se}", g.mean[i]);
            for j in 0..4 {
                let v: Vec<f64> = singles.iter().map(|x| x.cov[(i, j)]).collect();
                let m = v.iter().sum::<f64>() / s as f64;
                let se = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (s - 1) as f64 / s as f64).sqrt();
                assert!(g.cov[(i, j)].abs() <= 3.0 * se, "alpha {alpha} cov[{i},{j}] {} se {se}", g.cov[(i, j)]);
            }
        }
        let std_eps = standardize_draws(&eps).unwrap();
        let g0 = energy_gradients(&std_eps, &lp.y, &lp.model, &lp.post, &lp.prior, alpha).unwrap();
        assert!(g0.mean.amax() < 1e-9 && g0.cov.amax() < 1e-9);
    }
}

#[test]
fn single_zero_draw_gradient_by_hand() {
    let (m0, s0, m, s, r, y) = (0.5, 2.0, 1.2, 0.7, 0.8, 2.0);
    let prior = GaussianBelief::new(dvector![m0], dmatrix![s0]).unwrap();
    let q = GaussianBelief::new(dvector![m], dmatrix![s]).unwrap();
    let model = MeasurementModel::linear(dmatrix![1.0], dmatrix![r]).unwrap();
    // With eps = 0 the sample sits at m and E = const - log(s)/2 + (y-m)^2/(2r) - m m0/s0 + m^2/(2 s0).
    let want_m = -(y - m) / r - m0 / s0 + m / s0;
    let want_s = -0.5 / s;
    for alpha in [1.0, 0.999] {
        let g = energy_gradients(&DMatrix::zeros(1, 1), &dvector![y], &model, &q, &prior, alpha).unwrap();
        assert!((g.mean[0] - want_m).abs() < 1e-12);
        assert!((g.cov[(0, 0)] - want_s).abs() < 1e-12);
    }
}

#[test]
fn natural_step_examples() {
    let q = GaussianBelief::new(dvector![1.0, -1.0], dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
    let (same, rho) = natural_gradient_step(&q, &DVector::zeros(2), &DMatrix::zeros(2, 2), 0.3).unwrap();
    assert_eq!(rho, 0.3);
    assert!((same.mean() - q.mean()).norm() < 1e-15 && (same.cov() - q.cov()).norm() < 1e-15);

    let q1 = GaussianBelief::new(dvector![3.0], dmatrix![2.0]).unwrap();
    let (n1, _) = natural_gradient_step(&q1, &dvector![1.0], &dmatrix![0.0], 0.1).unwrap();
    assert!((n1.mean()[0] - 2.8).abs() < 1e-15);

    let gm = dvector![0.3, -0.2];
    let gc = dmatrix![0.1, 0.05; 0.05, -0.2];
    let (n2, rho) = natural_gradient_step(&q, &gm, &gc, 0.5).unwrap();
    assert_eq!(rho, 0.5);
    let want_mean = q.mean() - q.cov() * &gm * 0.5;
    let want_cov = q.cov() - q.cov() * &gc * q.cov() * 0.5;
    assert!((n2.mean() - want_mean).norm() < 1e-14);
    assert!((n2.cov() - want_cov).norm() < 1e-14);
    assert!(n2.cov().clone().cholesky().is_some());

    // A huge positive curvature step must be halved until the covariance stays PD.
    let (n3, rho) = natural_gradient_step(&q1, &dvector![0.0], &dmatrix![1.0], 4.0).unwrap();
    assert!(rho < 4.0 && n3.cov()[(0, 0)] > 0.0);
    assert!(natural_gradient_step(&q1, &dvector![0.0], &dmatrix![1e9], 1.0).is_err());
}

#[test]
fn update_config_rules() {
    let (prior, model, y) = range_problem(5);
    let bad = AlphaConfig { iters: 0, ..AlphaConfig::default() };
    assert!(matches!(efkf_update(&prior, &y, &model, &bad), Err(FilterError::InvalidConfig(_))));
    let bad = AlphaConfig::with_alpha(0.0);
    assert!(matches!(efkf_update(&prior, &y, &model, &bad), Err(FilterError::InvalidConfig(_))));

    let noop = AlphaConfig { iters: 1, step0: 0.0, ..AlphaConfig::with_alpha(0.7) };
    let (post, trace) = efkf_update(&prior, &y, &model, &noop).unwrap();
    assert_eq!(post.mean(), prior.mean());
    assert_eq!(post.cov(), prior.cov());
    assert_eq!(trace.records.len(), 1);

    let cfg = AlphaConfig { iters: 40, ..AlphaConfig::with_alpha(0.5) };
    let (_, trace) = efkf_update(&prior, &y, &model, &cfg).unwrap();
    assert_eq!(trace.records.len(), 40);
    assert!(trace.records.iter().all(|r| r.cov.clone().cholesky().is_some()));
}

#[test]
fn fixed_draws_give_monotone_energy() {
    let (prior, model, y) = range_problem(13);
    for alpha in [0.1, 0.5, 0.7, 0.9] {
        let cfg = AlphaConfig {
            samples: 64,
            iters: 60,
            fixed_crn: true,
            seed: 99,
            ..AlphaConfig::with_alpha(alpha)
        };
        let (_, trace) = efkf_update(&prior, &y, &model, &cfg).unwrap();
        for w in trace.records.windows(2) {
            assert!(w[1].energy <= w[0].energy + 1e-8, "alpha {alpha}: {} -> {}", w[0].energy, w[1].energy);
        }
    }
}

#[test]
fn snis_tilted_moments_of_exact_posterior() {
    let lp = linear_problem(41, 3, 2);
    for alpha in [0.3, 0.7, 1.0] {
        let t = tilted_moments_snis(&lp.post, &lp.y, &lp.model, &lp.prior, alpha, 5000, &mut rng(42)).unwrap();
        for i in 0..3 {
            let se = (lp.post.cov()[(i, i)] / t.ess).sqrt();
            assert!((t.moments.mean()[i] - lp.post.mean()[i]).abs() <= 3.0 * se);
            let v = lp.post.cov()[(i, i)];
            assert!((t.moments.cov()[(i, i)] - v).abs() <= 3.0 * v * (2.0 / t.ess).sqrt());
        }
    }
    assert!(tilted_moments_snis(&lp.post, &lp.y, &lp.model, &lp.prior, 0.0, 500, &mut rng(1)).is_err());
    assert!(tilted_moments_snis(&lp.post, &lp.y, &lp.model, &lp.prior, 0.5, 99, &mut rng(1)).is_err());
}

#[test]
fn standardized_draws_have_exact_moments() {
    let eps = normal_mat(&mut rng(2), 50, 3);
    let z = standardize_draws(&eps).unwrap();
    let mean = z.row_mean();
    assert!(mean.amax() < 1e-12);
    let cov = z.tr_mul(&z) / 50.0;
    assert!((cov - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
    assert!(standardize_draws(&normal_mat(&mut rng(2), 3, 3)).is_err());
}
