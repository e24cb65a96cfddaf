//! Sweep execution and `results.csv` emission.

use std::io::Write;
use std::path::{Path, PathBuf};

use cetsim_core::controller::{select_mode, ControllerError, SelectionRequest};
use cetsim_core::protocols::{run_round, ProtocolError, RoundContext, Session};
use cetsim_core::{compute_cost, rng_stream, ModeVariant, Scenario};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, Experiment, ExperimentConfig, Variants};

pub const HEADER: [&str; 15] = [
    "mode",
    "variant",
    "scenario",
    "snr_db",
    "seed",
    "round",
    "accuracy",
    "inference_ms",
    "transmission_ms",
    "total_ms",
    "flops_g",
    "memory_mb",
    "bytes_tx",
    "attacks_hit",
    "defenses_hit",
];

pub const THREADS_ENV: &str = "CETSIM_THREADS";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{scenario} {snr_db} dB {variant} round {round}: {source}")]
    Round {
        scenario: Scenario,
        snr_db: f64,
        variant: String,
        round: u32,
        source: ProtocolError,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(e) => e.exit_code(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub variant: ModeVariant,
    pub scenario: Scenario,
    pub snr_db: f64,
    pub seed: u64,
    pub round: u32,
    pub accuracy: f64,
    pub inference_ms: f64,
    pub transmission_ms: f64,
    pub total_ms: f64,
    pub flops_g: f64,
    pub memory_mb: f64,
    pub bytes_tx: u64,
    pub attacks_hit: u32,
    pub defenses_hit: u32,
}

impl Row {
    pub fn record(&self) -> [String; 15] {
        [
            self.variant.mode().to_string(),
            self.variant.to_string(),
            self.scenario.to_string(),
            self.snr_db.to_string(),
            self.seed.to_string(),
            self.round.to_string(),
            format!("{:.6}", self.accuracy),
            format!("{:.6}", self.inference_ms),
            format!("{:.6}", self.transmission_ms),
            format!("{:.6}", self.total_ms),
            self.flops_g.to_string(),
            self.memory_mb.to_string(),
            self.bytes_tx.to_string(),
            self.attacks_hit.to_string(),
            self.defenses_hit.to_string(),
        ]
    }
}

/// One independently seeded unit of work.
#[derive(Debug, Clone, PartialEq)]
struct Job {
    scenario: Scenario,
    snr_db: f64,
    /// `None` means the controller picks each round.
    variant: Option<ModeVariant>,
}

fn jobs(config: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for s in &config.sweep {
        for &snr_db in &s.snr_db {
            match &s.variants {
                Variants::Auto => out.push(Job {
                    scenario: s.scenario,
                    snr_db,
                    variant: None,
                }),
                Variants::List(vs) => out.extend(vs.iter().map(|v| Job {
                    scenario: s.scenario,
                    snr_db,
                    variant: Some(*v),
                })),
            }
        }
    }
    out
}

/// Rounds the sweep would produce if nothing is skipped.
pub fn expected_rows(config: &ExperimentConfig) -> usize {
    jobs(config).len() * config.rounds_per_point as usize
}

fn run_job(exp: &Experiment, job: &Job, seed: u64, sample_outcomes: bool) -> Result<Vec<Row>, RunError> {
    let cfg = &exp.config;
    let mut ctx = RoundContext::new(&exp.topology, &exp.table, &exp.codecs, job.scenario, job.snr_db);
    ctx.payloads = exp.payloads.clone();
    ctx.attacks = &cfg.attacks;
    ctx.defenses = cfg.defenses.clone();
    let mut session = Session::new(&cfg.defenses);
    let label = job.variant.map_or_else(|| "auto".to_string(), |v| v.to_string());
    let request = SelectionRequest::for_terminal(
        &exp.topology,
        cfg.controller.terminal,
        cfg.controller.latency_budget_s,
        cfg.controller.min_accuracy,
        job.scenario,
        job.snr_db,
    );
    let mut selection = None;
    let mut rows = Vec::with_capacity(cfg.rounds_per_point as usize);
    for round in 0..cfg.rounds_per_point {
        let variant = match job.variant {
            Some(v) => v,
            None => {
                if round % cfg.controller.reselect_every == 0 {
                    selection = Some(select_mode(&request, &exp.topology, &exp.table, &exp.payloads));
                }
                match selection.as_ref().expect("selected on round 0") {
                    Ok(s) => {
                        ctx.anchor = Some(cfg.controller.terminal);
                        ctx.decision_note = Some(s.detail());
                        s.variant
                    }
                    Err(ControllerError::NoFeasibleMode { .. }) => continue,
                    Err(e) => {
                        return Err(RunError::Config(ConfigError::Invalid {
                            path: "controller".into(),
                            message: e.to_string(),
                        }))
                    }
                }
            }
        };
        let stream = rng_stream(
            &format!("round/{}/{:?}/{}/{}", job.scenario, job.snr_db, label, round),
            seed,
        );
        let result = run_round(variant, &ctx, &mut session, &stream).map_err(|source| RunError::Round {
            scenario: job.scenario,
            snr_db: job.snr_db,
            variant: label.clone(),
            round,
            source,
        })?;
        let accuracy = if sample_outcomes {
            let mut r = stream.child("outcome");
            if r.random_bool(result.accuracy.clamp(0.0, 1.0)) { 1.0 } else { 0.0 }
        } else {
            result.accuracy
        };
        let cost = compute_cost(variant, &exp.table).expect("table covers every variant");
        rows.push(Row {
            variant,
            scenario: job.scenario,
            snr_db: job.snr_db,
            seed,
            round,
            accuracy,
            inference_ms: result.latency.inference_s * 1e3,
            transmission_ms: result.latency.transmission_s * 1e3,
            total_ms: result.latency.total_s * 1e3,
            flops_g: cost.flops_g,
            memory_mb: cost.memory_mb,
            bytes_tx: result.bytes_tx,
            attacks_hit: result.attacks_hit,
            defenses_hit: result.defenses_hit,
        });
    }
    Ok(rows)
}

/// Worker count from `CETSIM_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|n| *n > 0)
}

/// Runs every sweep point; rows come back in sweep order whatever the
/// completion order was.
pub fn run_sweep(exp: &Experiment, seed: u64, sample_outcomes: bool) -> Result<Vec<Row>, RunError> {
    let work = jobs(&exp.config);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| RunError::Pool(e.to_string()))?;
    let chunks: Vec<Result<Vec<Row>, RunError>> =
        pool.install(|| work.par_iter().map(|j| run_job(exp, j, seed, sample_outcomes)).collect());
    let mut rows = Vec::new();
    for c in chunks {
        rows.extend(c?);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[Row], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub rows: usize,
    pub results: PathBuf,
    pub manifest: PathBuf,
}

pub fn simulate(
    config_path: &Path,
    out_dir: Option<&Path>,
    seed_override: Option<u64>,
    sample_outcomes: bool,
) -> Result<SimulateSummary, RunError> {
    let exp = ExperimentConfig::load(config_path)?;
    let out_dir = match (out_dir, &exp.config.output_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => config_path.parent().unwrap_or(Path::new(".")).join(d),
        (None, None) => {
            return Err(ConfigError::Invalid {
                path: config_path.display().to_string(),
                message: "no output directory: pass --out or set output_dir".into(),
            }
            .into())
        }
    };
    let seed = seed_override.unwrap_or(exp.config.seed);
    let sample = sample_outcomes || exp.config.sample_outcomes;
    let rows = run_sweep(&exp, seed, sample)?;

    let io = |path: &Path, e: &dyn std::fmt::Display| RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| io(&out_dir, &e))?;
    let results = out_dir.join("results.csv");
    let file = std::fs::File::create(&results).map_err(|e| io(&results, &e))?;
    write_csv(&rows, std::io::BufWriter::new(file)).map_err(|e| io(&results, &e))?;
    let manifest = out_dir.join("manifest.toml");
    std::fs::write(&manifest, exp.manifest_toml(seed, sample)).map_err(|e| io(&manifest, &e))?;
    Ok(SimulateSummary {
        rows: rows.len(),
        results,
        manifest,
    })
}
