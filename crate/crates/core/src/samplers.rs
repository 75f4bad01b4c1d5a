//! Reverse-process steps and the full conditional samplers.
//!
//! All solvers share the same skeleton: start from `x_T ~ N(0, I)`, query the
//! score model for a noise prediction at every step, turn it into a
//! measurement-aware step, and return the final `x_0`. They differ in how the
//! measurement enters:
//!
//! * `Dcs` corrects the noise prediction with [`run_nam`] before stepping.
//! * `Ddnm` projects the posterior-mean estimate onto `{x : A x = y}`.
//! * `DpsJf` subtracts a residual gradient taken with respect to the
//!   posterior-mean estimate (no Jacobian of the score model).
//! * `Unconditional` ignores the measurement.
//!
//! A run whose state stops being finite ends early and returns that state,
//! so it scores as an infinite MSE instead of failing.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DcsError, Result};
use crate::metrics::{mse, psnr};
use crate::nam::{residual_pvalue, run_nam, NamConfig};
use crate::operators::Measurement;
use crate::prior::{tweedie, ScoreModel};
use crate::rng::standard_normal;
use crate::schedule::Schedule;

/// Guidance scale used by DPS-JF when the residual vanishes.
pub const DPS_ZETA_CAP: f64 = 1e3;
const DPS_RESIDUAL_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Dcs,
    DpsJf,
    Ddnm,
    Unconditional,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Dcs => "dcs",
            SolverKind::DpsJf => "dps_jf",
            SolverKind::Ddnm => "ddnm",
            SolverKind::Unconditional => "unconditional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub solver: SolverKind,
    #[serde(rename = "T")]
    pub steps: usize,
    /// `None` means DDIM for DDNM and DDPM for everything else.
    pub sampler_step: Option<StepKind>,
    pub ddim_eta: f64,
    pub nam: NamConfig,
    pub dps_zeta: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Dcs,
            steps: 50,
            sampler_step: None,
            ddim_eta: 0.0,
            nam: NamConfig::default(),
            dps_zeta: 1.0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn new(solver: SolverKind, steps: usize) -> Self {
        Self {
            solver,
            steps,
            ..Self::default()
        }
    }

    pub fn step_kind(&self) -> StepKind {
        self.sampler_step.unwrap_or(match self.solver {
            SolverKind::Ddnm => StepKind::Ddim,
            _ => StepKind::Ddpm,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DcsError::Config("solver.T must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ddim_eta) {
            return Err(DcsError::Config(format!(
                "solver.ddim_eta must lie in [0, 1], got {}",
                self.ddim_eta
            )));
        }
        match self.solver {
            SolverKind::Dcs => self.nam.validate(),
            SolverKind::DpsJf if !(self.dps_zeta > 0.0 && self.dps_zeta.is_finite()) => Err(
                DcsError::Config(format!("solver.dps_zeta must be positive, got {}", self.dps_zeta)),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub nam_iters: usize,
    pub pvalue: f64,
    pub mean_abs_res: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub x0_hat: DVector<f64>,
    /// One entry per reverse step, ordered from `t = T` down to `t = 1`.
    pub per_step: Vec<StepRecord>,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
}

impl RunRecord {
    fn new(x0_hat: DVector<f64>, per_step: Vec<StepRecord>) -> Self {
        Self {
            x0_hat,
            per_step,
            mse: None,
            psnr: None,
        }
    }

    /// Fills in the recovery metrics against the ground-truth signal.
    pub fn score_against(&mut self, x0: &DVector<f64>, peak: f64) -> Result<()> {
        self.mse = Some(mse(&self.x0_hat, x0)?);
        self.psnr = Some(psnr(&self.x0_hat, x0, peak)?);
        Ok(())
    }

    pub fn mean_nam_iters(&self) -> f64 {
        if self.per_step.is_empty() {
            return 0.0;
        }
        self.per_step.iter().map(|s| s.nam_iters as f64).sum::<f64>() / self.per_step.len() as f64
    }
}

fn check_reverse_step(t: usize, schedule: &Schedule) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(DcsError::Index {
            index: t,
            max: schedule.steps(),
        });
    }
    Ok(())
}

/// Ancestral DDPM step:
/// `x_{t-1} = (x_t - beta_t / sigma_t * eps) / sqrt(1 - beta_t) + sqrt(beta_tilde_t) z`,
/// with `beta_tilde_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)` and no
/// noise on the final step.
pub fn ddpm_step(
    x_t: &DVector<f64>,
    eps_hat: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
    rng: &mut impl rand::Rng,
) -> Result<DVector<f64>> {
    check_reverse_step(t, schedule)?;
    check_dim("ddpm_step", x_t.len(), eps_hat.len())?;
    let beta = schedule.beta(t);
    let mean = (x_t - eps_hat * (beta / schedule.sigma(t))) / (1.0 - beta).sqrt();
    if t == 1 {
        return Ok(mean);
    }
    let var = beta * schedule.sigma(t - 1).powi(2) / schedule.sigma(t).powi(2);
    Ok(mean + standard_normal(rng, x_t.len()) * var.sqrt())
}

/// Noise scale injected by a DDIM step with stochasticity `eta`; `eta = 1`
/// reproduces the DDPM posterior variance.
pub fn ddim_noise_scale(t: usize, schedule: &Schedule, eta: f64) -> f64 {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let ratio = schedule.sigma(t - 1).powi(2) / schedule.sigma(t).powi(2);
    eta * (ratio * (1.0 - ab_t / ab_prev)).max(0.0).sqrt()
}

/// DDIM step:
/// `x_{t-1} = sqrt(alpha_bar_{t-1}) x0_hat + sqrt(sigma_{t-1}^2 - s^2) eps + s z`.
pub fn ddim_step(
    x_t: &DVector<f64>,
    eps_hat: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
    eta: f64,
    rng: &mut impl rand::Rng,
) -> Result<DVector<f64>> {
    check_reverse_step(t, schedule)?;
    check_dim("ddim_step", x_t.len(), eps_hat.len())?;
    let x0_hat = tweedie(x_t, eps_hat, t, schedule);
    let s = ddim_noise_scale(t, schedule, eta);
    let direction = (schedule.sigma(t - 1).powi(2) - s * s).max(0.0).sqrt();
    let mut next = x0_hat * schedule.alpha_bar(t - 1).sqrt() + eps_hat * direction;
    if s > 0.0 {
        next += standard_normal(rng, x_t.len()) * s;
    }
    Ok(next)
}

fn reverse_step(
    cfg: &SolverConfig,
    x_t: &DVector<f64>,
    eps_hat: &DVector<f64>,
    t: usize,
    schedule: &Schedule,
    rng: &mut impl rand::Rng,
) -> Result<DVector<f64>> {
    match cfg.step_kind() {
        StepKind::Ddpm => ddpm_step(x_t, eps_hat, t, schedule, rng),
        StepKind::Ddim => ddim_step(x_t, eps_hat, t, schedule, cfg.ddim_eta, rng),
    }
}

fn diverged(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !v.is_finite())
}

/// Noise prediction that makes [`tweedie`] return `x0_hat` at step `t`.
fn eps_for_estimate(x_t: &DVector<f64>, x0_hat: &DVector<f64>, t: usize, schedule: &Schedule) -> DVector<f64> {
    (x_t - x0_hat * schedule.alpha_bar(t).sqrt()) / schedule.sigma(t)
}

fn check_setup(
    meas: &Measurement,
    score: &dyn ScoreModel,
    schedule: &Schedule,
    cfg: &SolverConfig,
    expected: SolverKind,
) -> Result<()> {
    cfg.validate()?;
    if cfg.solver != expected {
        return Err(DcsError::Config(format!(
            "{} sampler called with solver = {}",
            expected.name(),
            cfg.solver.name()
        )));
    }
    if cfg.steps != schedule.steps() {
        return Err(DcsError::Config(format!(
            "solver.T = {} but the schedule has {} steps",
            cfg.steps,
            schedule.steps()
        )));
    }
    check_dim("signal dimension vs operator", meas.op.in_dim(), score.dim())
}

fn residual_record(meas: &Measurement, x0_hat: &DVector<f64>, t: usize, schedule: &Schedule) -> Result<StepRecord> {
    let res = &meas.y - meas.op.apply(x0_hat)?;
    let d = residual_pvalue(&res, meas.sigma_y, schedule.sigma(t))?;
    Ok(StepRecord {
        t,
        nam_iters: 0,
        pvalue: d.pvalue,
        mean_abs_res: d.mean_abs_res,
    })
}

/// Measurement-conditioned sampling with noise-aware likelihood correction.
///
/// At every step the corrected noise prediction `eps_theta + eps_y` (score
/// `-(eps_theta + eps_y) / sigma_t`) drives the reverse step.
pub fn dcs_sample(
    meas: &Measurement,
    score: &dyn ScoreModel,
    schedule: &Schedule,
    cfg: &SolverConfig,
    rng: &mut impl rand::Rng,
) -> Result<RunRecord> {
    check_setup(meas, score, schedule, cfg, SolverKind::Dcs)?;
    let mut x = standard_normal(rng, score.dim());
    let mut per_step = Vec::with_capacity(schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let eps = score.eps(&x, t, schedule)?;
        let nam = run_nam(&x, &eps, t, schedule, meas, &cfg.nam)?;
        per_step.push(StepRecord {
            t,
            nam_iters: nam.iters_used,
            pvalue: nam.final_pvalue,
            mean_abs_res: nam.final_mean_abs_res,
        });
        x = reverse_step(cfg, &x, &(eps + nam.eps_y), t, schedule, rng)?;
        if diverged(&x) {
            break;
        }
    }
    Ok(RunRecord::new(x, per_step))
}

/// Null-space projection sampler: the posterior-mean estimate is replaced by
/// `A^+ y + (I - A^+ A) x0_hat` before each step.
pub fn ddnm_sample(
    meas: &Measurement,
    score: &dyn ScoreModel,
    schedule: &Schedule,
    cfg: &SolverConfig,
    rng: &mut impl rand::Rng,
) -> Result<RunRecord> {
    check_setup(meas, score, schedule, cfg, SolverKind::Ddnm)?;
    let op = &meas.op;
    let range_part = op.pinv_apply(&meas.y)?;
    let mut x = standard_normal(rng, score.dim());
    let mut per_step = Vec::with_capacity(schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let eps = score.eps(&x, t, schedule)?;
        let x0_hat = tweedie(&x, &eps, t, schedule);
        let projected = &range_part + &x0_hat - op.pinv_apply(&op.apply(&x0_hat)?)?;
        per_step.push(residual_record(meas, &projected, t, schedule)?);
        let eps_proj = eps_for_estimate(&x, &projected, t, schedule);
        x = reverse_step(cfg, &x, &eps_proj, t, schedule, rng)?;
        if diverged(&x) {
            break;
        }
    }
    Ok(RunRecord::new(x, per_step))
}

/// Jacobian-free diffusion posterior sampling: the guidance gradient is taken
/// with respect to the posterior-mean estimate and scaled by
/// `dps_zeta / ||A x0_hat - y||`.
pub fn dps_jf_sample(
    meas: &Measurement,
    score: &dyn ScoreModel,
    schedule: &Schedule,
    cfg: &SolverConfig,
    rng: &mut impl rand::Rng,
) -> Result<RunRecord> {
    check_setup(meas, score, schedule, cfg, SolverKind::DpsJf)?;
    let mut x = standard_normal(rng, score.dim());
    let mut per_step = Vec::with_capacity(schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let eps = score.eps(&x, t, schedule)?;
        let x0_hat = tweedie(&x, &eps, t, schedule);
        let residual = meas.op.apply(&x0_hat)? - &meas.y;
        let guidance = meas.op.adjoint(&residual)?;
        let norm = residual.norm();
        let zeta = if norm < DPS_RESIDUAL_FLOOR {
            DPS_ZETA_CAP
        } else {
            cfg.dps_zeta / norm
        };
        per_step.push(residual_record(meas, &x0_hat, t, schedule)?);
        x = reverse_step(cfg, &x, &eps, t, schedule, rng)? - guidance * zeta;
        if diverged(&x) {
            break;
        }
    }
    Ok(RunRecord::new(x, per_step))
}

/// Plain reverse diffusion from the prior; the measurement only feeds the
/// per-step diagnostics.
pub fn unconditional_sample(
    meas: &Measurement,
    score: &dyn ScoreModel,
    schedule: &Schedule,
    cfg: &SolverConfig,
    rng: &mut impl rand::Rng,
) -> Result<RunRecord> {
    check_setup(meas, score, schedule, cfg, SolverKind::Unconditional)?;
    let mut x = standard_normal(rng, score.dim());
    let mut per_step = Vec::with_capacity(schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let eps = score.eps(&x, t, schedule)?;
        per_step.push(residual_record(meas, &tweedie(&x, &eps, t, schedule), t, schedule)?);
        x = reverse_step(cfg, &x, &eps, t, schedule, rng)?;
        if diverged(&x) {
            break;
        }
    }
    Ok(RunRecord::new(x, per_step))
}

/// Dispatches on `cfg.solver`.
pub fn solve(
    meas: &Measurement,
    score: &dyn ScoreModel,
    schedule: &Schedule,
    cfg: &SolverConfig,
    rng: &mut impl rand::Rng,
) -> Result<RunRecord> {
    match cfg.solver {
        SolverKind::Dcs => dcs_sample(meas, score, schedule, cfg, rng),
        SolverKind::DpsJf => dps_jf_sample(meas, score, schedule, cfg, rng),
        SolverKind::Ddnm => ddnm_sample(meas, score, schedule, cfg, rng),
        SolverKind::Unconditional => unconditional_sample(meas, score, schedule, cfg, rng),
    }
}
