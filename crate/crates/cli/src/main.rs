use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcs_core::harness::{run_selftest, run_to_dir, sweep_to_dir, ExperimentConfig, SweepConfig};
use dcs_core::DcsError;

/// Diffusion-based solvers for linear inverse problems on mixture priors.
#[derive(Parser)]
#[command(name = "dcsolve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and aggregate.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand a grid over a base experiment and run every cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check core invariants and print PASS/FAIL per property.
    Selftest,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn fail(e: DcsError) -> ExitCode {
    eprintln!("dcsolve: {e}");
    ExitCode::from(if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    })
}

/// A config file that cannot be read is a validation error, not a runtime one.
fn read_config(path: &PathBuf) -> Result<String, DcsError> {
    std::fs::read_to_string(path)
        .map_err(|e| DcsError::Config(format!("cannot read {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run { config, out } => {
            let result = read_config(&config)
                .and_then(|text| ExperimentConfig::from_json(&text))
                .and_then(|cfg| run_to_dir(&cfg, out.as_deref()).map(|rows| (cfg, rows)));
            match result {
                Ok((cfg, rows)) => {
                    let dir = out.unwrap_or(cfg.output_dir);
                    println!("wrote {} rows to {}", rows.len(), dir.join("metrics.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Sweep { config, out } => {
            let result = read_config(&config)
                .and_then(|text| SweepConfig::from_json(&text))
                .and_then(|cfg| sweep_to_dir(&cfg, out.as_deref()).map(|o| (cfg, o)));
            match result {
                Ok((cfg, o)) => {
                    let dir = out.unwrap_or(cfg.base.output_dir);
                    println!(
                        "wrote {} rows in {} cells to {}",
                        o.rows.len(),
                        o.aggregates.len(),
                        dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Selftest => match run_selftest(&mut std::io::stdout()) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(EXIT_RUNTIME),
            Err(e) => fail(e.into()),
        },
    }
}
