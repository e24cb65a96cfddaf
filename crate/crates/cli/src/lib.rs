//! Experiment runner for the cetsim simulator: config loading, sweeps,
//! result files and calibration checks.

pub mod config;
pub mod plot;
pub mod runner;

use std::path::{Path, PathBuf};

use cetsim_core::CalibrationTable;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cetsim", version, about = "Cloud-edge-terminal multimodal sensing simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every sweep point of a config and write results.csv plus a manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report sampled 0/1 outcomes instead of success probabilities.
        #[arg(long)]
        sample_outcomes: bool,
    },
    /// Draw accuracy-vs-SNR charts and the complexity table from results.csv.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a calibration file against every table constraint.
    ValidateCalibration { path: PathBuf },
}

/// Prints a per-constraint report; returns the exit code.
pub fn validate_calibration(path: &Path) -> i32 {
    let origin = path.display().to_string();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {origin}: {e}");
            return 3;
        }
    };
    let report = match CalibrationTable::inspect(&text, &origin) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 3;
        }
    };
    for c in &report.checks {
        println!("{c}");
    }
    match report.first_error {
        None => {
            println!("calibration OK");
            0
        }
        Some(e) => {
            eprintln!("error: {e}");
            3
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            sample_outcomes,
        } => match runner::simulate(&config, out.as_deref(), seed, sample_outcomes) {
            Ok(s) => {
                println!("{} rows -> {}", s.rows, s.results.display());
                println!("manifest -> {}", s.manifest.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Command::Plot { input, out } => match plot::plot(&input, &out) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Command::ValidateCalibration { path } => validate_calibration(&path),
    }
}
