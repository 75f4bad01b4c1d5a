//! Discrete variance-preserving noise schedule.
//!
//! `alpha_bar[t]` is the signal fraction retained after `t` forward steps and
//! `sigma[t] = sqrt(1 - alpha_bar[t])` the matching noise scale. Index `0` is
//! the clean signal.

use nalgebra::DVector;

use crate::error::{DcsError, Result};
use crate::rng::standard_normal;

/// Reference step count the linear beta endpoints are quoted for.
pub const REFERENCE_STEPS: usize = 1000;
pub const BETA_MIN: f64 = 1e-4;
pub const BETA_MAX: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Linear schedule with the default endpoints, respaced to `steps` steps.
pub fn make_linear_schedule(steps: usize) -> Result<Schedule> {
    Schedule::linear(steps)
}

impl Schedule {
    pub fn linear(steps: usize) -> Result<Self> {
        Self::linear_with(steps, BETA_MIN, BETA_MAX)
    }

    /// Builds a `steps`-step schedule from the reference 1000-step linear
    /// beta ramp `beta_min..beta_max`.
    ///
    /// The cumulative log signal level of the reference ramp is sampled at
    /// `i * 1000 / steps` (log-linear between integer points), which keeps
    /// `alpha_bar[steps]` identical for every step count and every beta
    /// inside `(0, 1)`. For `steps = 1000` this is exactly the reference ramp.
    pub fn linear_with(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DcsError::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(DcsError::Config(format!(
                "beta endpoints must satisfy 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            )));
        }
        let n = REFERENCE_STEPS;
        // Cumulative log alpha_bar of the reference ramp.
        let mut log_ab = Vec::with_capacity(n + 1);
        log_ab.push(0.0_f64);
        for i in 0..n {
            let beta = beta_min + (beta_max - beta_min) * i as f64 / (n - 1) as f64;
            let prev = log_ab[i];
            log_ab.push(prev + (-beta).ln_1p());
        }
        let log_ab_at = |tau: f64| -> f64 {
            let lo = (tau.floor() as usize).min(n);
            if lo == n {
                return log_ab[n];
            }
            let frac = tau - lo as f64;
            log_ab[lo] + frac * (log_ab[lo + 1] - log_ab[lo])
        };
        let scale = n as f64 / steps as f64;
        let log_levels: Vec<f64> = (0..=steps)
            .map(|i| if i == steps { log_ab[n] } else { log_ab_at(i as f64 * scale) })
            .collect();
        let beta = log_levels
            .windows(2)
            .map(|w| -(w[1] - w[0]).exp_m1())
            .collect();
        Ok(Self::from_log_levels(steps, beta, &log_levels))
    }

    /// Schedule from explicit per-step betas, each in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(DcsError::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DcsError::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut log_levels = vec![0.0_f64];
        for b in &beta {
            let prev = *log_levels.last().unwrap();
            log_levels.push(prev + (-b).ln_1p());
        }
        Ok(Self::from_log_levels(beta.len(), beta, &log_levels))
    }

    fn from_log_levels(steps: usize, beta: Vec<f64>, log_levels: &[f64]) -> Self {
        let alpha_bar = log_levels.iter().map(|l| l.exp()).collect();
        let sigma = log_levels.iter().map(|l| (-l.exp_m1()).sqrt()).collect();
        Self {
            steps,
            beta,
            alpha_bar,
            sigma,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Per-step noise rate for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "beta index {t} out of 1..={}", self.steps);
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(DcsError::Index {
                index: t,
                max: self.steps,
            })
        } else {
            Ok(())
        }
    }

    /// `x_t = sqrt(alpha_bar[t]) x0 + sigma[t] z` for a given noise vector.
    pub fn forward_with_noise(
        &self,
        x0: &DVector<f64>,
        t: usize,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_step(t)?;
        crate::error::check_dim("forward_with_noise", x0.len(), z.len())?;
        Ok(x0 * self.alpha_bar[t].sqrt() + z * self.sigma[t])
    }

    /// Draws `x_t` from the forward process and returns it together with the
    /// standard normal noise that produced it.
    pub fn forward_sample(
        &self,
        x0: &DVector<f64>,
        t: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_step(t)?;
        let z = standard_normal(rng, x0.len());
        let xt = self.forward_with_noise(x0, t, &z)?;
        Ok((xt, z))
    }
}
