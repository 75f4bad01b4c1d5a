//! Cross-product experiment grids.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{
    aggregate, ensure_dir, run_seeds, with_thread_cap, write_aggregate, write_metrics, AggregateRow,
    MetricsRow,
};
use crate::error::{DcsError, Result};
use crate::operators::OperatorSpec;
use crate::samplers::SolverKind;

/// Axes left out fall back to the base experiment's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub sigma_y: Option<Vec<f64>>,
    #[serde(rename = "T", default)]
    pub steps: Option<Vec<usize>>,
    #[serde(default)]
    pub solvers: Option<Vec<SolverKind>>,
    #[serde(default)]
    pub operators: Option<Vec<OperatorSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<MetricsRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
    match values {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(DcsError::Config(format!("grid.{name}: must not be empty"))),
        Some(v) => Ok(v.clone()),
    }
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| DcsError::Config(format!("sweep config: {e}")))?;
        cfg.cells()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Expanded experiments in grid order: operator, solver, sigma_y, T.
    pub fn cells(&self) -> Result<Vec<ExperimentConfig>> {
        let base = &self.base;
        let operators = axis("operators", &self.grid.operators, base.operator.clone())?;
        let solvers = axis("solvers", &self.grid.solvers, base.solver.solver)?;
        let sigmas = axis("sigma_y", &self.grid.sigma_y, base.sigma_y)?;
        let steps = axis("T", &self.grid.steps, base.solver.steps)?;
        let mut cells = Vec::new();
        for op in &operators {
            for &solver in &solvers {
                for &sigma_y in &sigmas {
                    for &t in &steps {
                        let mut cell = base.clone();
                        cell.operator = op.clone();
                        cell.solver.solver = solver;
                        cell.solver.steps = t;
                        cell.sigma_y = sigma_y;
                        cell.emit_images = false;
                        cell.validate()?;
                        cells.push(cell);
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// Runs every cell (cells in parallel, seeds within a cell in parallel) and
/// returns raw rows plus one aggregate row per cell, both in grid order.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepOutput> {
    let cells = cfg.cells()?;
    let per_cell: Vec<Vec<MetricsRow>> = with_thread_cap(|| {
        cells
            .par_iter()
            .map(|c| Ok(run_seeds(c)?.into_iter().map(|o| o.row).collect()))
            .collect::<Result<Vec<_>>>()
    })??;
    let aggregates = per_cell.iter().map(|r| aggregate(r)).collect::<Result<_>>()?;
    Ok(SweepOutput {
        rows: per_cell.into_iter().flatten().collect(),
        aggregates,
    })
}

pub fn sweep_to_dir(cfg: &SweepConfig, out_dir: Option<&Path>) -> Result<SweepOutput> {
    let dir = out_dir.unwrap_or(&cfg.base.output_dir);
    cfg.cells()?;
    ensure_dir(dir)?;
    let out = sweep(cfg)?;
    write_metrics(&dir.join("metrics.csv"), &out.rows)?;
    write_aggregate(&dir.join("aggregate.csv"), &out.aggregates)?;
    Ok(out)
}
