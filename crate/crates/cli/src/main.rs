//! `qrp`: reproduce the learnt-map tomography study from a TOML config.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use output::{Provenance, Writer};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(qrp_core::Error),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<qrp_core::Error> for CliError {
    fn from(e: qrp_core::Error) -> Self {
        use qrp_core::Error as E;
        match e {
            E::Io(_) | E::Json(_) | E::Csv(_) => CliError::Io(e.to_string()),
            other => CliError::Numerical(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "qrp", version, about = "Learnt-map bosonic state tomography experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Condition-number-optimised displacement sets.
    Optimize,
    /// Idealised and learnt maps with their element-wise MSE per D.
    Learn,
    /// Kitten-state reconstruction fidelities.
    Reconstruct,
    /// Per-observable errors of the kitten states, sorted by |α|.
    ObservableErrors,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Optimize => "optimize",
            Command::Learn => "learn",
            Command::Reconstruct => "reconstruct",
            Command::ObservableErrors => "observable-errors",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.output = out;
    }
    config.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let provenance = Provenance {
        command: cli.command.name(),
        config_hash: config.hash(),
        seed: config.seed,
    };
    log::info!("{} with config {} (seed {})", provenance.command, provenance.config_hash, provenance.seed);
    let writer = Writer::new(&config.output, provenance)?;
    let mut ctx = commands::Context {
        settings: config.settings(),
        config: &config,
        writer,
    };
    match cli.command {
        Command::Optimize => commands::optimize(&mut ctx)?,
        Command::Learn => commands::learn(&mut ctx)?,
        Command::Reconstruct => commands::reconstruct(&mut ctx)?,
        Command::ObservableErrors => commands::observable_errors(&mut ctx)?,
    }
    for p in ctx.writer.written() {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
