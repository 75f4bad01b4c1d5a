mod common;

use common::{normal_pdf, stacked_posterior_mean, trapezoid, v};
use dcs_core::prelude::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn two_modes_1d() -> GmmPrior {
    GmmPrior::new(vec![0.35, 0.65], vec![v(&[-1.2]), v(&[0.8])], vec![v(&[0.3]), v(&[0.1])]).unwrap()
}

fn prior_density_1d(p: &GmmPrior, x: f64) -> f64 {
    (0..p.n_components())
        .map(|k| p.weights()[k] * normal_pdf(x, p.means()[k][0], p.variances()[k][0]))
        .sum()
}

fn random_prior(rng: &mut impl Rng, k: usize, d: usize) -> GmmPrior {
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    let means = (0..k).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5))).collect();
    let vars = (0..k).map(|_| DVector::from_fn(d, |_, _| rng.random_range(0.05..0.8))).collect();
    GmmPrior::new(w, means, vars).unwrap()
}

#[test]
fn marginal_at_zero_is_the_prior() {
    let s = make_linear_schedule(100).unwrap();
    let p = two_modes_1d();
    assert_eq!(p.marginal(0, &s).unwrap(), p);
}

#[test]
fn standard_normal_stays_standard() {
    let s = make_linear_schedule(100).unwrap();
    let p = GmmPrior::gaussian(DVector::zeros(3), 1.0).unwrap();
    for t in [1, 17, 100] {
        let m = p.marginal(t, &s).unwrap();
        assert!(m.variances()[0].iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}

#[test]
fn marginal_density_matches_grid_convolution() {
    let s = make_linear_schedule(1000).unwrap();
    let p = two_modes_1d();
    let h = 1e-3;
    let grid: Vec<f64> = (0..=20_000).map(|i| -10.0 + i as f64 * h).collect();
    let prior_vals: Vec<f64> = grid.iter().map(|x0| prior_density_1d(&p, *x0)).collect();
    for t in [50, 300, 900] {
        let (a, s2) = (s.alpha_bar(t).sqrt(), s.sigma(t).powi(2));
        let marginal = p.marginal(t, &s).unwrap();
        let mut sup: f64 = 0.0;
        for i in 0..=40 {
            let x = -3.0 + 0.15 * i as f64;
            let integrand: Vec<f64> = grid
                .iter()
                .zip(&prior_vals)
                .map(|(x0, p0)| p0 * normal_pdf(x, a * x0, s2))
                .collect();
            let conv = trapezoid(&integrand, h);
            let exact = marginal.log_density(&v(&[x])).unwrap().exp();
            sup = sup.max((conv - exact).abs());
        }
        assert!(sup < 1e-6, "t={t}: sup error {sup}");
    }
}

#[test]
fn single_gaussian_score_closed_form() {
    let s = make_linear_schedule(200).unwrap();
    let mu = v(&[0.4, -0.7]);
    let var = v(&[0.2, 0.5]);
    let p = GmmPrior::new(vec![1.0], vec![mu.clone()], vec![var.clone()]).unwrap();
    let x = v(&[0.1, 0.9]);
    let t = 77;
    let (ab, s2) = (s.alpha_bar(t), s.sigma(t).powi(2));
    let score = p.score(&x, t, &s).unwrap();
    for i in 0..2 {
        let expected = -(x[i] - ab.sqrt() * mu[i]) / (ab * var[i] + s2);
        assert!((score[i] - expected).abs() < 1e-12);
    }
    let eps = p.eps(&x, t, &s).unwrap();
    assert_eq!(eps, &score * -s.sigma(t));
}

#[test]
fn symmetric_mixture_has_zero_score_at_center() {
    let s = make_linear_schedule(100).unwrap();
    let p = GmmPrior::new(vec![0.5, 0.5], vec![v(&[-1.0]), v(&[1.0])], vec![v(&[0.2]), v(&[0.2])]).unwrap();
    for t in [0, 10, 90] {
        assert!(p.score(&v(&[0.0]), t, &s).unwrap()[0].abs() < 1e-14);
    }
}

#[test]
fn nan_input_is_an_argument_error() {
    let s = make_linear_schedule(10).unwrap();
    let p = two_modes_1d();
    assert!(matches!(p.score(&v(&[f64::NAN]), 3, &s), Err(DcsError::Argument(_))));
}

#[test]
fn far_tail_score_is_finite() {
    let s = make_linear_schedule(10).unwrap();
    let p = two_modes_1d();
    let g = p.score(&v(&[1e4]), 1, &s).unwrap();
    assert!(g[0].is_finite() && g[0] < 0.0);
}

#[test]
fn score_matches_finite_differences() {
    let s = make_linear_schedule(1000).unwrap();
    let mut rng = stream_rng(21, 0);
    let h = 1e-5;
    for _ in 0..20 {
        let p = random_prior(&mut rng, 3, 2);
        let t = rng.random_range(0..=1000);
        let m = p.marginal(t, &s).unwrap();
        let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let g = p.score(&x, t, &s).unwrap();
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.log_density(&xp).unwrap() - m.log_density(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3), "fd {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn point_mass_posterior_mean_is_the_point() {
    let s = make_linear_schedule(100).unwrap();
    let mu = v(&[0.3, -0.4]);
    let p = GmmPrior::point_mass(mu.clone()).unwrap();
    for t in [1, 50, 100] {
        let m = posterior_mean_oracle(&p, &v(&[2.0, 1.0]), t, &s).unwrap();
        assert!((m - &mu).amax() < 1e-6);
    }
}

#[test]
fn posterior_mean_at_zero_is_the_input() {
    let s = make_linear_schedule(100).unwrap();
    let x = v(&[0.25]);
    assert!((posterior_mean_oracle(&two_modes_1d(), &x, 0, &s).unwrap() - &x).amax() < 1e-15);
}

#[test]
fn posterior_mean_matches_quadrature() {
    let s = make_linear_schedule(1000).unwrap();
    let p = two_modes_1d();
    let h = 1e-3;
    let grid: Vec<f64> = (0..=16_000).map(|i| -8.0 + i as f64 * h).collect();
    for (t, x_t) in [(20, 0.3), (150, -1.0), (400, 0.05), (700, 1.4), (950, -0.6)] {
        let (a, s2) = (s.alpha_bar(t).sqrt(), s.sigma(t).powi(2));
        let joint: Vec<f64> = grid.iter().map(|x0| prior_density_1d(&p, *x0) * normal_pdf(x_t, a * x0, s2)).collect();
        let first: Vec<f64> = grid.iter().zip(&joint).map(|(x0, j)| x0 * j).collect();
        let quad = trapezoid(&first, h) / trapezoid(&joint, h);
        let exact = posterior_mean_oracle(&p, &v(&[x_t]), t, &s).unwrap()[0];
        assert!((quad - exact).abs() < 1e-6, "t={t}: {quad} vs {exact}");
    }
}

#[test]
fn tweedie_affine_identity() {
    let s = make_linear_schedule(50).unwrap();
    let x = v(&[1.0, -2.0]);
    let out = tweedie(&x, &DVector::zeros(2), 20, &s);
    assert!((out - &x / s.alpha_bar(20).sqrt()).amax() < 1e-15);
    assert_eq!(tweedie(&x, &v(&[5.0, 5.0]), 0, &s), x);
}

#[test]
fn tweedie_of_exact_score_is_the_posterior_mean() {
    let s = make_linear_schedule(1000).unwrap();
    let mut rng = stream_rng(22, 0);
    let p = random_prior(&mut rng, 4, 3);
    for _ in 0..100 {
        let t = rng.random_range(1..=1000);
        let x_t = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
        let est = tweedie(&x_t, &p.eps(&x_t, t, &s).unwrap(), t, &s);
        let oracle = posterior_mean_oracle(&p, &x_t, t, &s).unwrap();
        assert!((est - oracle).amax() < 1e-8);
    }
}

#[test]
fn conjugate_update_for_single_gaussian() {
    let mu = v(&[0.5, -0.5]);
    let p = GmmPrior::gaussian(mu.clone(), 0.4).unwrap();
    let y = v(&[1.0, 0.0]);
    let sy = 0.3;
    let post = p.conditional_posterior(&LinearOperator::identity(2), &y, sy).unwrap();
    let gain = 0.4 / (0.4 + sy * sy);
    let mean = &mu + (&y - &mu) * gain;
    assert!((post.mean() - mean).amax() < 1e-12);
    let var = 0.4 * sy * sy / (0.4 + sy * sy);
    assert!((&post.covs()[0] - DMatrix::<f64>::identity(2, 2) * var).amax() < 1e-12);
}

#[test]
fn uninformative_measurement_keeps_prior_weights() {
    let p = GmmPrior::new(vec![0.3, 0.7], vec![v(&[-1.0, 0.0]), v(&[1.0, 0.5])], vec![v(&[1.0, 1.0]), v(&[1.0, 1.0])])
        .unwrap();
    let post = p.conditional_posterior(&LinearOperator::identity(2), &v(&[0.7, -0.2]), 1e3).unwrap();
    for (a, b) in post.weights().iter().zip(p.weights()) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn conditional_posterior_mean_matches_2d_quadrature() {
    let p = GmmPrior::new(vec![0.4, 0.6], vec![v(&[-0.8, 0.5]), v(&[0.9, -0.3])], vec![v(&[0.3, 0.2]), v(&[0.15, 0.4])])
        .unwrap();
    let row = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
    let op = LinearOperator::dense(row).unwrap();
    let y = v(&[0.2]);
    let sy = 0.4;
    let post = p.conditional_posterior(&op, &y, sy).unwrap();
    let h = 0.01;
    let n = 1001;
    let grid: Vec<f64> = (0..n).map(|i| -5.0 + i as f64 * h).collect();
    let (mut z, mut m0, mut m1) = (0.0, 0.0, 0.0);
    for a in &grid {
        for b in &grid {
            let prior: f64 = (0..2)
                .map(|k| {
                    p.weights()[k]
                        * normal_pdf(*a, p.means()[k][0], p.variances()[k][0])
                        * normal_pdf(*b, p.means()[k][1], p.variances()[k][1])
                })
                .sum();
            let w = prior * normal_pdf(y[0], a + 0.5 * b, sy * sy);
            z += w;
            m0 += a * w;
            m1 += b * w;
        }
    }
    let quad = v(&[m0 / z, m1 / z]);
    assert!((post.mean() - &quad).amax() < 1e-5, "{} vs {quad}", post.mean());
}

#[test]
fn conditional_tweedie_matches_stacked_conditioning() {
    let s = make_linear_schedule(1000).unwrap();
    let mut rng = stream_rng(23, 0);
    for _ in 0..20 {
        let p = random_prior(&mut rng, 3, 3);
        let a = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let op = LinearOperator::dense(a.clone()).unwrap();
        let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let sy = rng.random_range(0.1..0.6);
        let post = p.conditional_posterior(&op, &y, sy).unwrap();
        let t = rng.random_range(1..=1000);
        let x_t = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let est = tweedie(&x_t, &post.eps(&x_t, t, &s).unwrap(), t, &s);
        let oracle = stacked_posterior_mean(&p, &a, &y, sy, &x_t, t, &s);
        assert!((est - oracle).amax() < 1e-8);
    }
}

#[test]
fn noiseless_rank_deficient_measurement_is_degenerate() {
    let p = GmmPrior::gaussian(DVector::zeros(2), 1.0).unwrap();
    let op = LinearOperator::dense(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0])).unwrap();
    assert!(matches!(
        p.conditional_posterior(&op, &v(&[0.0, 0.0]), 0.0),
        Err(DcsError::DegeneratePosterior(_))
    ));
}

#[test]
fn invalid_priors_are_rejected() {
    assert!(GmmPrior::new(vec![0.5, 0.6], vec![v(&[0.0]), v(&[1.0])], vec![v(&[1.0]), v(&[1.0])]).is_err());
    assert!(GmmPrior::new(vec![1.0], vec![v(&[0.0])], vec![v(&[0.0])]).is_err());
    assert!(GmmPrior::new(vec![1.0], vec![v(&[0.0])], vec![v(&[1.0, 1.0])]).is_err());
    assert!(GmmPrior::new(vec![], vec![], vec![]).is_err());
}

#[test]
fn json_round_trip() {
    let p = two_modes_1d();
    let text = serde_json::to_string(&p).unwrap();
    assert!(text.contains("\"weights\""));
    let back: GmmPrior = serde_json::from_str(&text).unwrap();
    assert_eq!(back, p);
    let parsed: GmmPrior =
        serde_json::from_str(r#"{"weights":[1.0],"means":[[0.0,1.0]],"variances":[[1.0,2.0]]}"#).unwrap();
    assert_eq!(parsed.dim(), 2);
    assert!(serde_json::from_str::<GmmPrior>(r#"{"weights":[2.0],"means":[[0.0]],"variances":[[1.0]]}"#).is_err());
}

#[test]
fn sampling_follows_component_weights() {
    let p = GmmPrior::new(vec![0.2, 0.8], vec![v(&[-5.0]), v(&[5.0])], vec![v(&[0.1]), v(&[0.1])]).unwrap();
    let mut rng = stream_rng(24, 0);
    let n = 20_000;
    let left = (0..n).filter(|_| p.sample(&mut rng)[0] < 0.0).count() as f64 / n as f64;
    let se = (0.2f64 * 0.8 / n as f64).sqrt();
    assert!((left - 0.2).abs() < 4.0 * se);
    // variance of the selected component
    let draws: Vec<f64> = (0..n).map(|_| p.sample(&mut rng)[0]).filter(|x| *x > 0.0).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
    assert!((var - 0.1).abs() < 0.01 && (mean - 5.0).abs() < 0.02);
}
