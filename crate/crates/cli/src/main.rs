//! Command line front end: configuration-driven smoothing runs, Monte Carlo
//! tables, cross-validation and the scaling benchmark.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Ctx;
use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver { module: String, message: String },
    Io(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver { .. } => 3,
            CliError::Io(_) => 4,
        }
    }

    /// Machine-readable one-line JSON on stderr.
    fn report(&self) {
        let (category, module, message) = match self {
            CliError::Config(m) => ("config", "cli", m.clone()),
            CliError::Solver { module, message } => ("solver", module.as_str(), message.clone()),
            CliError::Io(m) => ("io", "cli", m.clone()),
        };
        eprintln!(
            "{{\"category\":\"{category}\",\"module\":\"{module}\",\"message\":\"{}\"}}",
            message.replace('"', "'")
        );
    }
}

#[derive(Parser)]
#[command(name = "smoothkit", version, about = "Kalman smoothing as structured optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario name (see `validate` for the list).
    #[arg(long)]
    scenario: Option<String>,
    /// Smoothing method.
    #[arg(long)]
    method: Option<String>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replication count for table experiments.
    #[arg(long)]
    reps: Option<usize>,
    /// Scale factor on replication/sample counts.
    #[arg(long)]
    scale: Option<f64>,
    /// Output directory (default: env SMOOTHKIT_OUT_DIR, then ./out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one smoothing scenario and write estimate/diagnostics/plot files.
    Smooth(Common),
    /// Run a Monte Carlo table experiment over noise-mixture cells.
    Table(Common),
    /// Grid cross-validation for the functional-recovery scenario.
    Cv(Common),
    /// Validate a configuration without running any solver.
    Validate(Common),
    /// Time the block-tridiagonal solve at increasing horizons.
    Bench(Common),
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| CliError::Config(format!("invalid config: {e}")))?
        }
        None => RunConfig::default(),
    };
    if common.scenario.is_some() {
        cfg.scenario = common.scenario.clone();
    }
    if common.method.is_some() {
        cfg.method = common.method.clone();
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.reps.is_some() {
        cfg.replications = common.reps;
    }
    if common.scale.is_some() {
        cfg.scale = common.scale;
    }
    if let Some(dir) = &common.out_dir {
        cfg.output_dir = Some(dir.display().to_string());
    }
    Ok(cfg)
}

fn build_ctx(common: &Common) -> CliResult<Ctx> {
    let cfg = load_config(common)?;
    let violations = config::validate(&cfg);
    if !violations.is_empty() {
        return Err(CliError::Config(violations.join("; ")));
    }
    let out_dir = cfg
        .output_dir
        .clone()
        .map(PathBuf::from)
        .or_else(|| std::env::var("SMOOTHKIT_OUT_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    commands::ensure_out_dir(&out_dir)?;
    Ok(Ctx {
        seed: cfg.seed.unwrap_or(0),
        scale: cfg.scale.unwrap_or(1.0),
        cfg,
        out_dir,
    })
}

fn run() -> CliResult<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Smooth(c) => commands::run_smooth(&build_ctx(c)?),
        Command::Table(c) => commands::run_table(&build_ctx(c)?),
        Command::Cv(c) => commands::run_cv(&build_ctx(c)?),
        Command::Bench(c) => commands::run_bench(&build_ctx(c)?),
        Command::Validate(c) => {
            let cfg = load_config(c)?;
            let violations = config::validate(&cfg);
            if violations.is_empty() {
                println!("ok");
                Ok(())
            } else {
                for v in &violations {
                    println!("error: {v}");
                }
                Err(CliError::Config(format!("{} violation(s)", violations.len())))
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            ExitCode::from(e.exit_code())
        }
    }
}
