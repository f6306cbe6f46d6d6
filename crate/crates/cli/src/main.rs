mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{Frame, Mode, RunContext};
use config::{ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "kotelnikov", version, about = "Discrete-time decoherence under bandlimited quantum noise")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the configured seed; part of the configuration hash.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo sampling (0 = all cores). Does not affect results.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract mode streams and cache the effective schedules.
    Modes,
    /// Evolve the system with the cached schedule.
    Evolve {
        #[arg(long, value_enum, default_value_t = Frame::Moving)]
        frame: Frame,
        #[arg(long, value_enum, default_value_t = Mode::Density)]
        mode: Mode,
    },
    /// Sample quantum-jump histories in the moving frame.
    JumpMc,
    /// Brute-force reference on a truncated chain.
    Exact,
    /// Mode count of a classical bandlimited process.
    Classical,
    /// Largest deviation between one column of two output files on shared times.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "qubit_occupation")]
        column: String,
        /// Column of `b` when it differs from `--column`.
        #[arg(long)]
        column_b: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Diff { a, b, column, column_b } = &cli.command {
        let report = commands::diff(a, b, column, column_b.as_deref())?;
        println!(
            "max_abs_diff {:e} at t = {} mean_abs_diff {:e} over {} shared points",
            report.max_abs, report.at, report.mean_abs, report.points
        );
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let ctx = RunContext::new(cfg, cli.out.clone(), cli.workers)?;
    let written = match cli.command {
        Command::Modes => commands::modes(&ctx)?,
        Command::Evolve { frame, mode } => commands::evolve(&ctx, frame, mode)?,
        Command::JumpMc => commands::jump_mc(&ctx)?,
        Command::Exact => commands::exact(&ctx)?,
        Command::Classical => commands::classical(&ctx)?,
        Command::Diff { .. } => unreachable!("handled above"),
    };
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

/// 2 for configuration and parameter problems, 3 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(kotelnikov::Error::InvalidParameter { .. }) = cause.downcast_ref::<kotelnikov::Error>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
