use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::toy::ToyPriorSpec;
use crate::error::{DcsError, Result};
use crate::operators::OperatorSpec;
use crate::prior::GmmPrior;
use crate::samplers::{SolverConfig, SolverKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKeyword {
    /// Point mass at the origin; needs `dim` (or `image_shape`).
    PointMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSpec {
    Keyword(PriorKeyword),
    PointMassAt { point_mass: Vec<f64> },
    Toy { toy_gmm: ToyPriorSpec },
    Gmm(GmmPrior),
}

fn default_n_seeds() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_peak() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// One experiment: a prior, an operator, a noise level, a solver, and how
/// many seeds to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub prior: PriorSpec,
    pub operator: OperatorSpec,
    pub sigma_y: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub emit_images: bool,
    #[serde(default)]
    pub image_shape: Option<(usize, usize)>,
    /// Signal dimension for the `"point_mass"` keyword prior.
    #[serde(default)]
    pub dim: Option<usize>,
    /// Dynamic range used for PSNR.
    #[serde(default = "default_peak")]
    pub peak: f64,
    /// When false, `wall_ms` is written as 0 so output files are
    /// byte-reproducible.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| DcsError::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build_prior(&self) -> Result<GmmPrior> {
        match &self.prior {
            PriorSpec::Gmm(g) => Ok(g.clone()),
            PriorSpec::Toy { toy_gmm } => toy_gmm.build(),
            PriorSpec::PointMassAt { point_mass } => {
                if point_mass.is_empty() {
                    return Err(DcsError::Config("prior.point_mass must be nonempty".into()));
                }
                GmmPrior::point_mass(DVector::from_vec(point_mass.clone()))
            }
            PriorSpec::Keyword(PriorKeyword::PointMass) => {
                let dim = self
                    .dim
                    .or(self.image_shape.map(|(h, w)| h * w))
                    .ok_or_else(|| {
                        DcsError::Config("prior \"point_mass\" needs `dim` or `image_shape`".into())
                    })?;
                if dim == 0 {
                    return Err(DcsError::Config("dim must be positive".into()));
                }
                GmmPrior::point_mass(DVector::zeros(dim))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: DcsError| match e {
            DcsError::Config(msg) => DcsError::Config(format!("{name}: {msg}")),
            other => other,
        };
        let prior = self.build_prior().map_err(|e| field("prior", e))?;
        let op = self
            .operator
            .build(prior.dim())
            .map_err(|e| field("operator", e))?;
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return Err(DcsError::Config(format!("sigma_y: must be >= 0, got {}", self.sigma_y)));
        }
        self.solver.validate().map_err(|e| field("solver", e))?;
        if self.sigma_y == 0.0
            && self.solver.solver == SolverKind::Dcs
            && self.solver.nam.resolved_optimizer(&op) != crate::nam::NamOptimizer::Analytic
        {
            return Err(DcsError::Config(
                "solver.nam.optimizer: gradient optimizers need sigma_y > 0; use \"analytic\"".into(),
            ));
        }
        if self.n_seeds == 0 {
            return Err(DcsError::Config("n_seeds: must be at least 1".into()));
        }
        if !(self.peak > 0.0) {
            return Err(DcsError::Config("peak: must be positive".into()));
        }
        if let Some((h, w)) = self.image_shape {
            if h * w != prior.dim() {
                return Err(DcsError::Config(format!(
                    "image_shape: {h}x{w} does not match prior dimension {}",
                    prior.dim()
                )));
            }
        } else if self.emit_images {
            return Err(DcsError::Config("image_shape: required when emit_images is true".into()));
        }
        Ok(())
    }
}
