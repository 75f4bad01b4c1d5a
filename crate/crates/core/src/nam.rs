//! Noise-aware maximization of the measurement likelihood.
//!
//! Given `x_t` and a noise prediction `eps_theta`, find the correction `eps_y`
//! such that the posterior-mean estimate
//! `x0_hat = (x_t - sigma_t (eps_theta + eps_y)) / sqrt(alpha_bar_t)`
//! explains the measurement, i.e. maximize
//! `-||y - A x0_hat||^2 / (2 sigma_y^2)` over `eps_y`. Iteration stops as soon
//! as the residual is statistically indistinguishable from the measurement
//! noise: the two-sided tail probability of the mean absolute residual reaches
//! `sigma_t`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DcsError, Result};
use crate::operators::{LinearOperator, Measurement};
use crate::prior::tweedie;
use crate::schedule::Schedule;
use crate::stats::two_sided_pvalue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamOptimizer {
    #[serde(alias = "adam")]
    AdamW,
    SgdMomentum,
    Sgd,
    /// Closed-form least-squares fit through the operator pseudoinverse.
    Analytic,
}

impl NamOptimizer {
    pub fn name(self) -> &'static str {
        match self {
            NamOptimizer::AdamW => "adamw",
            NamOptimizer::SgdMomentum => "sgd_momentum",
            NamOptimizer::Sgd => "sgd",
            NamOptimizer::Analytic => "analytic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NamConfig {
    /// `None` picks per operator: analytic for masks, AdamW otherwise.
    pub optimizer: Option<NamOptimizer>,
    pub lr: f64,
    pub max_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub stopping_enabled: bool,
}

impl Default for NamConfig {
    fn default() -> Self {
        Self {
            optimizer: None,
            lr: 1.0,
            max_iters: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.9,
            stopping_enabled: true,
        }
    }
}

impl NamConfig {
    pub fn with_optimizer(optimizer: NamOptimizer) -> Self {
        Self {
            optimizer: Some(optimizer),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DcsError::Config(format!("nam.lr must be positive, got {}", self.lr)));
        }
        if self.max_iters == 0 {
            return Err(DcsError::Config("nam.max_iters must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(DcsError::Config("nam.adam_beta1/adam_beta2 must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(DcsError::Config("nam.adam_eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DcsError::Config("nam.weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DcsError::Config("nam.momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn resolved_optimizer(&self, op: &LinearOperator) -> NamOptimizer {
        self.optimizer.unwrap_or(match op {
            LinearOperator::Mask { .. } => NamOptimizer::Analytic,
            _ => NamOptimizer::AdamW,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamResult {
    pub eps_y: DVector<f64>,
    pub iters_used: usize,
    pub stopped_early: bool,
    pub final_pvalue: f64,
    pub final_mean_abs_res: f64,
    /// Mean absolute residual of every evaluated iterate, starting with
    /// `eps_y = 0`.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopDecision {
    pub pvalue: f64,
    pub stop: bool,
    pub mean_abs_res: f64,
}

pub fn mean_abs(v: &DVector<f64>) -> f64 {
    v.iter().map(|r| r.abs()).sum::<f64>() / v.len() as f64
}

/// `y - A tweedie(x_t, eps_theta + eps_y, t)`.
pub fn likelihood_residual(
    x_t: &DVector<f64>,
    eps_theta: &DVector<f64>,
    eps_y: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
    meas: &Measurement,
) -> Result<DVector<f64>> {
    check_dim("likelihood_residual eps_theta", x_t.len(), eps_theta.len())?;
    check_dim("likelihood_residual eps_y", x_t.len(), eps_y.len())?;
    schedule.check_step(t)?;
    let x0_hat = tweedie(x_t, &(eps_theta + eps_y), t, schedule);
    Ok(&meas.y - meas.op.apply(&x0_hat)?)
}

/// Gradient of the negative log-likelihood with respect to `eps_y`:
/// `sigma_t / (sqrt(alpha_bar_t) sigma_y^2) * A^T res`.
pub fn loss_gradient(
    x_t: &DVector<f64>,
    eps_theta: &DVector<f64>,
    eps_y: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
    meas: &Measurement,
) -> Result<DVector<f64>> {
    let res = likelihood_residual(x_t, eps_theta, eps_y, t, schedule, meas)?;
    gradient_from_residual(&res, t, schedule, meas)
}

fn gradient_from_residual(
    res: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
    meas: &Measurement,
) -> Result<DVector<f64>> {
    if meas.sigma_y <= 0.0 {
        return Err(DcsError::Argument(
            "likelihood gradient is undefined for sigma_y = 0; use the analytic optimizer".into(),
        ));
    }
    let scale = schedule.sigma(t) / (schedule.alpha_bar(t).sqrt() * meas.sigma_y.powi(2));
    Ok(meas.op.adjoint(res)? * scale)
}

/// Negative log-likelihood `||res||^2 / (2 sigma_y^2)`.
pub fn negative_log_likelihood(res: &DVector<f64>, sigma_y: f64) -> f64 {
    res.norm_squared() / (2.0 * sigma_y * sigma_y)
}

/// Residual z-test: `p = 2 Phi(-m / sigma_y)` with `m` the mean absolute
/// residual; optimization may stop once `p >= sigma_t`.
pub fn stop_test(res: &DVector<f64>, sigma_y: f64, sigma_t: f64) -> Result<StopDecision> {
    if !(sigma_y > 0.0) {
        return Err(DcsError::Argument(format!("stop test needs sigma_y > 0, got {sigma_y}")));
    }
    if res.is_empty() {
        return Err(DcsError::Argument("stop test needs a nonempty residual".into()));
    }
    let m = mean_abs(res);
    let pvalue = if m.is_finite() { two_sided_pvalue(m / sigma_y) } else { 0.0 };
    Ok(StopDecision {
        pvalue,
        stop: pvalue >= sigma_t,
        mean_abs_res: m,
    })
}

/// [`stop_test`] extended to noiseless measurements by its `sigma_y -> 0`
/// limit: the p-value is one for an exactly zero residual and zero otherwise.
pub fn residual_pvalue(res: &DVector<f64>, sigma_y: f64, sigma_t: f64) -> Result<StopDecision> {
    if sigma_y > 0.0 {
        return stop_test(res, sigma_y, sigma_t);
    }
    let m = mean_abs(res);
    let pvalue = if m == 0.0 { 1.0 } else { 0.0 };
    Ok(StopDecision {
        pvalue,
        stop: pvalue >= sigma_t,
        mean_abs_res: m,
    })
}

enum StepState {
    Adam {
        m: DVector<f64>,
        v: DVector<f64>,
        step: i32,
    },
    Momentum {
        velocity: DVector<f64>,
    },
    Plain,
}

impl StepState {
    fn new(optimizer: NamOptimizer, dim: usize) -> Self {
        match optimizer {
            NamOptimizer::AdamW => StepState::Adam {
                m: DVector::zeros(dim),
                v: DVector::zeros(dim),
                step: 0,
            },
            NamOptimizer::SgdMomentum => StepState::Momentum {
                velocity: DVector::zeros(dim),
            },
            _ => StepState::Plain,
        }
    }

    fn update(&mut self, param: &mut DVector<f64>, grad: &DVector<f64>, cfg: &NamConfig) {
        match self {
            StepState::Adam { m, v, step } => {
                *step += 1;
                if cfg.weight_decay > 0.0 {
                    *param *= 1.0 - cfg.lr * cfg.weight_decay;
                }
                let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
                let c1 = 1.0 - b1.powi(*step);
                let c2 = 1.0 - b2.powi(*step);
                for i in 0..param.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
                }
            }
            StepState::Momentum { velocity } => {
                *velocity *= cfg.momentum;
                *velocity += grad;
                param.axpy(-cfg.lr, velocity, 1.0);
            }
            StepState::Plain => param.axpy(-cfg.lr, grad, 1.0),
        }
    }
}

/// Runs the noise-aware maximization for one diffusion step `t >= 1`.
pub fn run_nam(
    x_t: &DVector<f64>,
    eps_theta: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
    meas: &Measurement,
    cfg: &NamConfig,
) -> Result<NamResult> {
    cfg.validate()?;
    schedule.check_step(t)?;
    if t == 0 {
        return Err(DcsError::Argument("noise-aware maximization needs t >= 1".into()));
    }
    let sigma_t = schedule.sigma(t);
    let optimizer = cfg.resolved_optimizer(&meas.op);
    let mut eps_y = DVector::zeros(x_t.len());
    let res0 = likelihood_residual(x_t, eps_theta, &eps_y, t, schedule, meas)?;

    if optimizer == NamOptimizer::Analytic {
        let a = schedule.alpha_bar(t).sqrt();
        eps_y = meas.op.pinv_apply(&res0)? * (-a / sigma_t);
        let res = likelihood_residual(x_t, eps_theta, &eps_y, t, schedule, meas)?;
        let decision = residual_pvalue(&res, meas.sigma_y, sigma_t)?;
        return Ok(NamResult {
            eps_y,
            iters_used: 1,
            stopped_early: cfg.stopping_enabled && decision.stop,
            final_pvalue: decision.pvalue,
            final_mean_abs_res: decision.mean_abs_res,
            trace: vec![mean_abs(&res0), decision.mean_abs_res],
        });
    }

    if meas.sigma_y <= 0.0 {
        return Err(DcsError::Argument(format!(
            "optimizer {} needs sigma_y > 0; use the analytic optimizer for noiseless measurements",
            optimizer.name()
        )));
    }
    let mut state = StepState::new(optimizer, x_t.len());
    let mut res = res0;
    let mut decision = stop_test(&res, meas.sigma_y, sigma_t)?;
    let mut trace = vec![decision.mean_abs_res];
    let mut iters = 0;
    while iters < cfg.max_iters && !(cfg.stopping_enabled && decision.stop) {
        let grad = gradient_from_residual(&res, t, schedule, meas)?;
        state.update(&mut eps_y, &grad, cfg);
        iters += 1;
        res = likelihood_residual(x_t, eps_theta, &eps_y, t, schedule, meas)?;
        decision = stop_test(&res, meas.sigma_y, sigma_t)?;
        trace.push(decision.mean_abs_res);
    }
    Ok(NamResult {
        eps_y,
        iters_used: iters,
        stopped_early: cfg.stopping_enabled && decision.stop,
        final_pvalue: decision.pvalue,
        final_mean_abs_res: decision.mean_abs_res,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::measure;
    use crate::rng::{standard_normal, stream_rng};
    use crate::stats::normal_quantile;
    use std::sync::Arc;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn stop_test_edges() {
        let d = stop_test(&DVector::zeros(4), 0.1, 0.999).unwrap();
        assert_eq!(d.pvalue, 1.0);
        assert!(d.stop);
        let d = stop_test(&v(&[1.0, -1.0]), 0.1, 1e-6).unwrap();
        assert!(d.pvalue < 1e-20);
        assert!(!d.stop);
        assert!(stop_test(&v(&[1.0]), 0.0, 0.5).is_err());
    }

    #[test]
    fn stop_threshold_matches_quantile() {
        let sigma_t = 0.3;
        let boundary = -0.1 * normal_quantile(sigma_t / 2.0);
        assert!(stop_test(&v(&[boundary * 0.999]), 0.1, sigma_t).unwrap().stop);
        assert!(!stop_test(&v(&[boundary * 1.001]), 0.1, sigma_t).unwrap().stop);
    }

    #[test]
    fn residual_uses_tweedie_estimate() {
        let s = Schedule::linear(50).unwrap();
        let op = Arc::new(LinearOperator::identity(2));
        let t = 10;
        let x_t = v(&[0.3, -0.2]);
        let y = v(&[0.5, 0.1]);
        let meas = Measurement::new(op, y.clone(), 0.1).unwrap();
        // eps making the estimate equal y exactly
        let eps = (&x_t - &y * s.alpha_bar(t).sqrt()) / s.sigma(t);
        let res = likelihood_residual(&x_t, &eps, &DVector::zeros(2), t, &s, &meas).unwrap();
        assert!(res.amax() < 1e-14);
    }

    #[test]
    fn gradient_scalar_case() {
        let s = Schedule::linear(50).unwrap();
        let t = 25;
        let meas = Measurement::new(Arc::new(LinearOperator::identity(1)), v(&[0.7]), 0.2).unwrap();
        let x_t = v(&[0.1]);
        let eps = v(&[0.4]);
        let zero = DVector::zeros(1);
        let res = likelihood_residual(&x_t, &eps, &zero, t, &s, &meas).unwrap();
        let g = loss_gradient(&x_t, &eps, &zero, t, &s, &meas).unwrap();
        let want = s.sigma(t) / (s.alpha_bar(t).sqrt() * 0.04) * res[0].abs();
        assert!((g[0].abs() - want).abs() < 1e-12);
        let noiseless = Measurement::new(meas.op.clone(), meas.y.clone(), 0.0).unwrap();
        assert!(loss_gradient(&x_t, &eps, &zero, t, &s, &noiseless).is_err());
    }

    #[test]
    fn consistent_prediction_needs_no_correction() {
        let s = Schedule::linear(50).unwrap();
        let t = 30;
        let x0 = v(&[0.2, -0.4, 0.6]);
        let z = v(&[1.0, 0.5, -0.3]);
        let x_t = s.forward_with_noise(&x0, t, &z).unwrap();
        let meas = Measurement::new(Arc::new(LinearOperator::identity(3)), x0, 0.05).unwrap();
        for opt in [NamOptimizer::AdamW, NamOptimizer::Analytic] {
            let r = run_nam(&x_t, &z, t, &s, &meas, &NamConfig::with_optimizer(opt)).unwrap();
            assert!(r.eps_y.amax() < 1e-12);
            assert!(r.iters_used <= 1);
            assert!(r.stopped_early);
        }
    }

    #[test]
    fn adam_reduces_residual() {
        let s = Schedule::linear(50).unwrap();
        let mut rng = stream_rng(9, 0);
        let d = 8;
        let op = Arc::new(LinearOperator::identity(d));
        let x0 = standard_normal(&mut rng, d) * 0.5;
        let meas = measure(&op, &x0, 0.01, &mut rng).unwrap();
        let t = 40;
        let x_t = standard_normal(&mut rng, d);
        let eps = DVector::zeros(d);
        let r = run_nam(&x_t, &eps, t, &s, &meas, &NamConfig::with_optimizer(NamOptimizer::AdamW)).unwrap();
        assert!(r.final_mean_abs_res < r.trace[0]);
        assert!(r.iters_used <= 50);
        assert_eq!(r.trace.len(), r.iters_used + 1);
    }

    #[test]
    fn analytic_mask_fits_observed_coordinates() {
        let s = Schedule::linear(50).unwrap();
        let mut rng = stream_rng(4, 0);
        let op = Arc::new(LinearOperator::mask(6, vec![0, 2, 5]).unwrap());
        let meas = Measurement::new(op, v(&[0.3, -0.8, 0.1]), 0.05).unwrap();
        let t = 17;
        let x_t = standard_normal(&mut rng, 6);
        let eps = standard_normal(&mut rng, 6);
        let r = run_nam(&x_t, &eps, t, &s, &meas, &NamConfig::default()).unwrap();
        let x0_hat = tweedie(&x_t, &(&eps + &r.eps_y), t, &s);
        for (k, &i) in [0usize, 2, 5].iter().enumerate() {
            assert!((x0_hat[i] - meas.y[k]).abs() < 1e-10);
        }
        // unobserved coordinates are untouched
        let plain = tweedie(&x_t, &eps, t, &s);
        assert_eq!(x0_hat[1], plain[1]);
    }

    #[test]
    fn disabled_stopping_runs_all_iterations() {
        let s = Schedule::linear(50).unwrap();
        let mut rng = stream_rng(2, 0);
        let op = Arc::new(LinearOperator::identity(4));
        let meas = measure(&op, &DVector::zeros(4), 0.1, &mut rng).unwrap();
        let x_t = standard_normal(&mut rng, 4);
        let cfg = NamConfig {
            optimizer: Some(NamOptimizer::Sgd),
            lr: 1e-3,
            max_iters: 7,
            stopping_enabled: false,
            ..NamConfig::default()
        };
        let r = run_nam(&x_t, &DVector::zeros(4), 3, &s, &meas, &cfg).unwrap();
        assert_eq!(r.iters_used, 7);
        assert!(!r.stopped_early);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = NamConfig {
            lr: 0.0,
            ..NamConfig::default()
        };
        assert!(matches!(bad.validate(), Err(DcsError::Config(_))));
        let bad = NamConfig {
            max_iters: 0,
            ..NamConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_uses_field_names() {
        let cfg: NamConfig =
            serde_json::from_str(r#"{"optimizer":"sgd_momentum","lr":0.5,"stopping_enabled":false}"#).unwrap();
        assert_eq!(cfg.optimizer, Some(NamOptimizer::SgdMomentum));
        assert_eq!(cfg.max_iters, 50);
        assert!(!cfg.stopping_enabled);
        assert!(serde_json::from_str::<NamConfig>(r#"{"learning_rate":1}"#).is_err());
    }
}
