//! Command-line front end: data generation, training, evaluation,
//! inference and the verification suites.

pub mod commands;
pub mod config;
pub mod error;
pub mod overlay;
pub mod verify;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

pub const THREADS_ENV: &str = "LANE2SEQ_THREADS";

#[derive(Debug, Parser)]
#[command(name = "laneseq", version, about = "Lane detection as token sequence generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus overrides, shared by the commands that take a config.
#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, alias = "spec")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.learning_rate=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (PGM images plus annotations).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain and/or tune; writes checkpoints, metrics.csv and the resolved config.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: commands::StageArg,
        /// Starting checkpoint (required for `--stage mfrl` unless OUT holds one).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Greedy-decode a dataset and report precision, recall and F1.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        format: commands::FormatArg,
        #[arg(long, default_value_t = laneseq_core::metrics::DEFAULT_TAU)]
        tau: f64,
        /// Also report Tusimple point accuracy.
        #[arg(long)]
        tusimple: bool,
        /// Directory for eval.json and eval.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Detect lanes in one PGM image and print them as JSON.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "anchor")]
        format: commands::FormatArg,
        /// Write a PPM overlay of the detected lanes.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Run oracle suites; exits 2 if any check fails.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: verify::Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON instead of one line per check.
        #[arg(long)]
        json: bool,
        /// Break one backward rule on purpose (checks that gradcheck notices).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Sizes the global worker pool from `LANE2SEQ_THREADS` if set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool already built by an embedding caller is fine
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenData { out, n, cfg } => {
            let cfg = cfg.resolve()?;
            commands::gen_data(&out, n, &cfg)?;
            log::info!("wrote {n} scenes to {}", out.display());
        }
        Command::Train { data, out, stage, ckpt, cfg } => {
            let cfg = cfg.resolve()?;
            let summary = commands::train(&data, &out, &cfg, stage, ckpt.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
        }
        Command::Eval { data, ckpt, format, tau, tusimple, out, cfg } => {
            let cfg = cfg.resolve()?;
            let reports = commands::eval(&data, &ckpt, &format.formats(), tau, tusimple, &cfg, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&reports).expect("serializable"));
        }
        Command::Infer { image, ckpt, format, render } => {
            let outputs = commands::infer(&image, &ckpt, &format.formats(), render.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&outputs).expect("serializable"));
        }
        Command::Verify { suite, seed, json, inject_fault } => {
            let fault = if inject_fault { laneseq_model::autodiff::Fault::NegateGeluBackward } else { Default::default() };
            let report = verify::run(suite, &verify::VerifyOptions { fault, seed });
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            } else {
                for c in &report.checks {
                    println!("{c}");
                }
                for (p, t) in &report.seconds {
                    println!("time {p:?} {t:.2}s");
                }
            }
            if !report.passed() {
                let failed = report.checks.iter().filter(|c| !c.passed).count();
                return Err(CliError::Verification(format!("{failed} of {} checks failed", report.checks.len())));
            }
        }
    }
    Ok(())
}
