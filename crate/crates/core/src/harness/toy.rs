//! Small synthetic problems used by the CLI defaults, the selftest, and the
//! directional experiments.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DcsError, Result};
use crate::operators::{box_kernel, measure, LinearOperator};
use crate::prior::GmmPrior;
use crate::rng::{stream_rng, streams};
use crate::samplers::{solve, RunRecord, SolverConfig};
use crate::schedule::Schedule;

/// Parameters of a seeded mixture of smooth periodic patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyPriorSpec {
    pub dim: usize,
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_component_std")]
    pub component_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_components() -> usize {
    4
}

fn default_component_std() -> f64 {
    0.1
}

impl Default for ToyPriorSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            components: default_components(),
            component_std: default_component_std(),
            seed: 0,
        }
    }
}

impl ToyPriorSpec {
    /// Component means are low-frequency sinusoids of amplitude at most 0.6
    /// with random frequency, phase and offset; weights are random but bounded
    /// away from zero.
    pub fn build(&self) -> Result<GmmPrior> {
        if self.dim == 0 || self.components == 0 {
            return Err(DcsError::Config("toy prior needs positive dim and components".into()));
        }
        if !(self.component_std > 0.0) {
            return Err(DcsError::Config("toy prior component_std must be positive".into()));
        }
        let mut rng = stream_rng(self.seed, 0x70_79);
        let mut weights: Vec<f64> = (0..self.components).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let d = self.dim as f64;
        let means = (0..self.components)
            .map(|_| {
                let freq = rng.random_range(1..=2) as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.3..0.5);
                let offset = rng.random_range(-0.1..0.1);
                DVector::from_fn(self.dim, |i, _| offset + amp * (2.0 * PI * freq * i as f64 / d + phase).sin())
            })
            .collect();
        let variances = vec![DVector::from_element(self.dim, self.component_std.powi(2)); self.components];
        GmmPrior::new(weights, means, variances)
    }
}

/// A prior, an operator and a noise level.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub prior: GmmPrior,
    pub op: Arc<LinearOperator>,
    pub sigma_y: f64,
}

/// Box-kernel length of the toy motion blur.
pub const TOY_BLUR_LEN: usize = 5;

impl ToyTask {
    /// 16-dimensional signals, 4x average-pooling.
    pub fn super_resolution(sigma_y: f64) -> Self {
        let prior = ToyPriorSpec::default().build().expect("default toy prior is valid");
        Self {
            op: Arc::new(LinearOperator::downsample(prior.dim(), 4).expect("4 divides 16")),
            prior,
            sigma_y,
        }
    }

    /// 16-dimensional signals, circular box blur.
    pub fn deblurring(sigma_y: f64) -> Self {
        let prior = ToyPriorSpec::default().build().expect("default toy prior is valid");
        Self {
            op: Arc::new(
                LinearOperator::circular_conv(prior.dim(), box_kernel(TOY_BLUR_LEN)).expect("kernel fits"),
            ),
            prior,
            sigma_y,
        }
    }

    /// Draws the ground truth and measurement for `seed`, solves, and scores
    /// the reconstruction (peak 1).
    pub fn run(&self, cfg: &SolverConfig, seed: u64) -> Result<(DVector<f64>, RunRecord)> {
        let schedule = Schedule::linear(cfg.steps)?;
        let x0 = self.prior.sample(&mut stream_rng(seed, streams::SIGNAL));
        let meas = measure(&self.op, &x0, self.sigma_y, &mut stream_rng(seed, streams::MEASUREMENT))?;
        let mut record = solve(&meas, &self.prior, &schedule, cfg, &mut stream_rng(seed, streams::SOLVER))?;
        record.score_against(&x0, 1.0)?;
        Ok((x0, record))
    }

    /// Mean MSE over seeds `0..n_seeds`, running seeds in parallel.
    pub fn mean_mse(&self, cfg: &SolverConfig, n_seeds: u64) -> Result<f64> {
        use rayon::prelude::*;
        let mses: Vec<f64> = (0..n_seeds)
            .into_par_iter()
            .map(|s| self.run(cfg, s).map(|(_, r)| r.mse.expect("scored")))
            .collect::<Result<_>>()?;
        Ok(mses.iter().sum::<f64>() / mses.len() as f64)
    }
}
