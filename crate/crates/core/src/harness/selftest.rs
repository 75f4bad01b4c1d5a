//! Quick invariant checks behind `dcsolve selftest`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::image::quantize;
use crate::error::Result;
use crate::nam::{likelihood_residual, loss_gradient, negative_log_likelihood, run_nam, NamConfig, NamOptimizer};
use crate::operators::{box_kernel, LinearOperator, Measurement};
use crate::prior::{posterior_mean_oracle, tweedie, GmmPrior, ScoreModel};
use crate::rng::{standard_normal, stream_rng, streams, DcsRng};
use crate::samplers::{solve, SolverConfig, SolverKind};
use crate::schedule::Schedule;
use crate::stats::normal_cdf;

type Check = fn() -> Result<bool>;

fn sample_ops(dim: usize, rng: &mut DcsRng) -> Result<Vec<LinearOperator>> {
    let dense = DMatrix::from_fn(dim / 2, dim, |_, _| rng.random_range(-1.0..1.0));
    Ok(vec![
        LinearOperator::identity(dim),
        LinearOperator::mask(dim, (0..dim).step_by(3).collect())?,
        LinearOperator::downsample(dim, 4)?,
        LinearOperator::circular_conv(dim, box_kernel(3))?,
        LinearOperator::dense(dense)?,
    ])
}

fn schedule_is_monotone() -> Result<bool> {
    let s = Schedule::linear(1000)?;
    let ab = s.alpha_bars();
    Ok(ab[0] == 1.0 && ab.windows(2).all(|w| w[1] < w[0]) && ab[1000] > 0.0)
}

fn tweedie_exact_for_point_mass() -> Result<bool> {
    let s = Schedule::linear(1000)?;
    let mut rng = stream_rng(11, streams::SOLVER);
    let x0 = standard_normal(&mut rng, 8);
    let prior = GmmPrior::point_mass(x0.clone())?;
    for _ in 0..100 {
        let t = rng.random_range(1..=1000);
        let (x_t, _) = s.forward_sample(&x0, t, &mut rng)?;
        let eps = prior.eps(&x_t, t, &s)?;
        if (tweedie(&x_t, &eps, t, &s) - &x0).amax() > 1e-6 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn tweedie_matches_posterior_mean() -> Result<bool> {
    let s = Schedule::linear(1000)?;
    let mut rng = stream_rng(12, streams::SOLVER);
    let prior = GmmPrior::new(
        vec![0.3, 0.7],
        vec![DVector::from_element(3, -1.0), DVector::from_element(3, 1.0)],
        vec![DVector::from_element(3, 0.05), DVector::from_element(3, 0.2)],
    )?;
    for _ in 0..50 {
        let t = rng.random_range(1..=1000);
        let x_t = standard_normal(&mut rng, 3);
        let via_score = tweedie(&x_t, &prior.eps(&x_t, t, &s)?, t, &s);
        let oracle = posterior_mean_oracle(&prior, &x_t, t, &s)?;
        if (via_score - oracle).amax() > 1e-8 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn adjoint_identity() -> Result<bool> {
    let mut rng = stream_rng(13, streams::SOLVER);
    for op in sample_ops(12, &mut rng)? {
        let x = standard_normal(&mut rng, op.in_dim());
        let u = standard_normal(&mut rng, op.out_dim());
        let lhs = op.apply(&x)?.dot(&u);
        let rhs = x.dot(&op.adjoint(&u)?);
        if (lhs - rhs).abs() > 1e-10 * (1.0 + lhs.abs()) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn pseudoinverse_identity() -> Result<bool> {
    let mut rng = stream_rng(14, streams::SOLVER);
    for op in sample_ops(12, &mut rng)? {
        let x = standard_normal(&mut rng, op.in_dim());
        let ax = op.apply(&x)?;
        if (op.apply(&op.pinv_apply(&ax)?)? - &ax).amax() > 1e-8 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn stop_test_calibration() -> Result<bool> {
    Ok((2.0 * normal_cdf(-1.959964) - 0.05).abs() < 1e-6)
}

fn gradient_matches_finite_differences() -> Result<bool> {
    let s = Schedule::linear(100)?;
    let mut rng = stream_rng(15, streams::SOLVER);
    for op in sample_ops(8, &mut rng)? {
        let op = Arc::new(op);
        let y = standard_normal(&mut rng, op.out_dim());
        let meas = Measurement::new(op, y, 0.3)?;
        let t = rng.random_range(1..=100);
        let x_t = standard_normal(&mut rng, 8);
        let eps = standard_normal(&mut rng, 8);
        let e_y = standard_normal(&mut rng, 8) * 0.1;
        let g = loss_gradient(&x_t, &eps, &e_y, t, &s, &meas)?;
        let h = 1e-5;
        let loss = |e: &DVector<f64>| -> Result<f64> {
            Ok(negative_log_likelihood(&likelihood_residual(&x_t, &eps, e, t, &s, &meas)?, 0.3))
        };
        for i in 0..8 {
            let mut plus = e_y.clone();
            let mut minus = e_y.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
            if (fd - g[i]).abs() > 1e-5 * (1.0 + g[i].abs()) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn analytic_nam_fits_noiseless_data() -> Result<bool> {
    let s = Schedule::linear(50)?;
    let mut rng = stream_rng(16, streams::SOLVER);
    let op = Arc::new(LinearOperator::downsample(8, 2)?);
    let x0 = standard_normal(&mut rng, 8);
    let meas = Measurement::new(op.clone(), op.apply(&x0)?, 0.0)?;
    let x_t = standard_normal(&mut rng, 8);
    let eps = standard_normal(&mut rng, 8);
    let cfg = NamConfig::with_optimizer(NamOptimizer::Analytic);
    let r = run_nam(&x_t, &eps, 25, &s, &meas, &cfg)?;
    let res = likelihood_residual(&x_t, &eps, &r.eps_y, 25, &s, &meas)?;
    Ok(res.amax() < 1e-8)
}

fn solver_is_deterministic() -> Result<bool> {
    let s = Schedule::linear(20)?;
    let prior = GmmPrior::gaussian(DVector::zeros(4), 0.25)?;
    let op = Arc::new(LinearOperator::identity(4));
    let meas = Measurement::new(op, DVector::from_element(4, 0.2), 0.1)?;
    let cfg = SolverConfig::new(SolverKind::Dcs, 20);
    let a = solve(&meas, &prior, &s, &cfg, &mut stream_rng(5, streams::SOLVER))?;
    let b = solve(&meas, &prior, &s, &cfg, &mut stream_rng(5, streams::SOLVER))?;
    Ok(a.x0_hat == b.x0_hat)
}

fn image_quantization() -> Result<bool> {
    Ok(quantize(1.0) == 255 && quantize(-1.0) == 0 && quantize(2.0) == 255 && quantize(-2.0) == 0)
}

const CHECKS: [(&str, Check); 10] = [
    ("schedule alpha_bar strictly decreasing", schedule_is_monotone),
    ("tweedie exact for point-mass prior", tweedie_exact_for_point_mass),
    ("tweedie of mixture score equals posterior mean", tweedie_matches_posterior_mean),
    ("operator adjoint identity", adjoint_identity),
    ("pseudoinverse identity A A+ A = A", pseudoinverse_identity),
    ("stop-test calibration at z = 1.96", stop_test_calibration),
    ("likelihood gradient matches finite differences", gradient_matches_finite_differences),
    ("analytic correction fits noiseless data", analytic_nam_fits_noiseless_data),
    ("solver output reproducible from seed", solver_is_deterministic),
    ("image quantization endpoints", image_quantization),
];

/// Prints one `PASS`/`FAIL` line per check and returns whether all passed.
pub fn run_selftest(out: &mut dyn Write) -> std::io::Result<bool> {
    let mut all = true;
    for (name, check) in CHECKS {
        let (ok, detail) = match check() {
            Ok(ok) => (ok, String::new()),
            Err(e) => (false, format!(" ({e})")),
        };
        all &= ok;
        writeln!(out, "{} {name}{detail}", if ok { "PASS" } else { "FAIL" })?;
    }
    Ok(all)
}
