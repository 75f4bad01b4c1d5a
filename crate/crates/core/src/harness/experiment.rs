use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::image::emit_image;
use crate::error::{DcsError, Result};
use crate::operators::measure;
use crate::rng::{stream_rng, streams};
use crate::samplers::solve;
use crate::schedule::Schedule;

pub const METRICS_HEADER: &str = "solver,operator,sigma_y,T,seed,mse,psnr,nam_iters_mean,wall_ms";
pub const AGGREGATE_HEADER: &str =
    "solver,operator,sigma_y,T,n,mse_mean,mse_se,psnr_mean,psnr_se,nam_iters_mean";

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "DCSOLVE_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub solver: String,
    pub operator: String,
    pub sigma_y: f64,
    pub steps: usize,
    pub seed: u64,
    pub mse: f64,
    pub psnr: f64,
    pub nam_iters_mean: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    fn fields(&self) -> [String; 9] {
        [
            self.solver.clone(),
            self.operator.clone(),
            self.sigma_y.to_string(),
            self.steps.to_string(),
            self.seed.to_string(),
            self.mse.to_string(),
            self.psnr.to_string(),
            self.nam_iters_mean.to_string(),
            self.wall_ms.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub solver: String,
    pub operator: String,
    pub sigma_y: f64,
    pub steps: usize,
    pub n: usize,
    pub mse_mean: f64,
    pub mse_se: f64,
    pub psnr_mean: f64,
    pub psnr_se: f64,
    pub nam_iters_mean: f64,
}

impl AggregateRow {
    fn fields(&self) -> [String; 10] {
        [
            self.solver.clone(),
            self.operator.clone(),
            self.sigma_y.to_string(),
            self.steps.to_string(),
            self.n.to_string(),
            self.mse_mean.to_string(),
            self.mse_se.to_string(),
            self.psnr_mean.to_string(),
            self.psnr_se.to_string(),
            self.nam_iters_mean.to_string(),
        ]
    }
}

/// Mean and standard error of the mean.
fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Summarizes rows that share one grid cell.
pub fn aggregate(rows: &[MetricsRow]) -> Result<AggregateRow> {
    let first = rows
        .first()
        .ok_or_else(|| DcsError::Argument("cannot aggregate zero rows".into()))?;
    let mses: Vec<f64> = rows.iter().map(|r| r.mse).collect();
    let psnrs: Vec<f64> = rows.iter().map(|r| r.psnr).collect();
    let (mse_mean, mse_se) = mean_se(&mses);
    let (psnr_mean, psnr_se) = mean_se(&psnrs);
    Ok(AggregateRow {
        solver: first.solver.clone(),
        operator: first.operator.clone(),
        sigma_y: first.sigma_y,
        steps: first.steps,
        n: rows.len(),
        mse_mean,
        mse_se,
        psnr_mean,
        psnr_se,
        nam_iters_mean: rows.iter().map(|r| r.nam_iters_mean).sum::<f64>() / rows.len() as f64,
    })
}

/// Ground truth and reconstruction of one seed, plus its metrics.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub row: MetricsRow,
    pub x0: DVector<f64>,
    pub x0_hat: DVector<f64>,
}

/// Runs `f` on a pool capped by `DCSOLVE_THREADS` when it is set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| DcsError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| DcsError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

/// Runs every seed of the experiment. Seed `s` uses
/// `solver.seed + s` for its signal, measurement and solver streams.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    let prior = cfg.build_prior()?;
    let op = Arc::new(cfg.operator.build(prior.dim())?);
    let schedule = Schedule::linear(cfg.solver.steps)?;
    let run_one = |s: usize| -> Result<SeedOutcome> {
        let seed = cfg.solver.seed.wrapping_add(s as u64);
        let start = Instant::now();
        let x0 = prior.sample(&mut stream_rng(seed, streams::SIGNAL));
        let meas = measure(&op, &x0, cfg.sigma_y, &mut stream_rng(seed, streams::MEASUREMENT))?;
        let mut record = solve(&meas, &prior, &schedule, &cfg.solver, &mut stream_rng(seed, streams::SOLVER))?;
        record.score_against(&x0, cfg.peak)?;
        let wall_ms = if cfg.record_wall_time {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        Ok(SeedOutcome {
            row: MetricsRow {
                solver: cfg.solver.solver.name().to_string(),
                operator: op.kind_name().to_string(),
                sigma_y: cfg.sigma_y,
                steps: cfg.solver.steps,
                seed,
                mse: record.mse.expect("scored above"),
                psnr: record.psnr.expect("scored above"),
                nam_iters_mean: record.mean_nam_iters(),
                wall_ms,
            },
            x0,
            x0_hat: record.x0_hat,
        })
    };
    (0..cfg.n_seeds).into_par_iter().map(run_one).collect()
}

/// Metrics rows of every seed, in seed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    Ok(with_thread_cap(|| run_seeds(cfg))??
        .into_iter()
        .map(|o| o.row)
        .collect())
}

fn write_table<const N: usize>(path: &Path, header: &str, rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header.split(','))?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_table(path, METRICS_HEADER, rows.iter().map(MetricsRow::fields))
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_table(path, AGGREGATE_HEADER, rows.iter().map(AggregateRow::fields))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    // surface an unwritable directory before any work is done
    let probe = dir.join(".dcsolve_write_probe");
    std::fs::File::create(&probe)?.write_all(b"")?;
    std::fs::remove_file(probe)?;
    Ok(())
}

/// Runs the experiment and writes `metrics.csv`, `aggregate.csv` and, when
/// requested, `img_<seed>_truth.pgm` / `img_<seed>_recon.pgm` into
/// `out_dir` (default: the configured `output_dir`).
pub fn run_to_dir(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let dir = out_dir.unwrap_or(&cfg.output_dir);
    ensure_dir(dir)?;
    let outcomes = with_thread_cap(|| run_seeds(cfg))??;
    let rows: Vec<MetricsRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_metrics(&dir.join("metrics.csv"), &rows)?;
    write_aggregate(&dir.join("aggregate.csv"), &[aggregate(&rows)?])?;
    if cfg.emit_images {
        let shape = cfg.image_shape.expect("validated");
        for o in &outcomes {
            emit_image(&o.x0, shape, &dir.join(format!("img_{}_truth.pgm", o.row.seed)))?;
            emit_image(&o.x0_hat, shape, &dir.join(format!("img_{}_recon.pgm", o.row.seed)))?;
        }
    }
    Ok(rows)
}
