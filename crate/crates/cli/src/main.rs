//! `ppdsgd` command-line driver.
//!
//! Exit codes: 0 success, 1 i/o failure, 2 configuration error, 3 violated
//! assumption (such as a disconnected graph), 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppdsgd::experiment::{execute, Command, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(
    name = "ppdsgd",
    version,
    about = "Privacy-preserving decentralized SGD experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sensor-network estimation curves for the private and baseline updates.
    RunConvex(Overrides),
    /// Small classifier training curves.
    RunNonconvex(Overrides),
    /// Entropy-based error bound over a grid of stepsize and gradient ranges.
    PrivacyBound(Overrides),
    /// Gradient inference against logged messages of an earlier run.
    AttackEval(Overrides),
    /// Noise-injection scheme at several noise levels against the private update.
    DpCompare(Overrides),
    /// Parse and check a configuration without running anything.
    ValidateConfig(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Number of rounds.
    #[arg(long)]
    horizon: Option<u64>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(o) = &self.out {
            config.output = o.clone();
        }
        if let Some(r) = self.reps {
            config.repetitions = r;
        }
        if let Some(k) = self.horizon {
            config.horizon = k;
        }
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let (overrides, command) = match &cli.command {
        Cmd::RunConvex(o) => (o, Some(Command::RunConvex)),
        Cmd::RunNonconvex(o) => (o, Some(Command::RunNonconvex)),
        Cmd::PrivacyBound(o) => (o, Some(Command::PrivacyBound)),
        Cmd::AttackEval(o) => (o, Some(Command::AttackEval)),
        Cmd::DpCompare(o) => (o, Some(Command::DpCompare)),
        Cmd::ValidateConfig(o) => (o, None),
    };
    let config = overrides.resolve()?;
    match command {
        Some(c) => {
            execute(&config, c)?;
            println!("{}: outputs in {}", c.name(), config.output.display());
        }
        None => {
            config.validate()?;
            println!("configuration ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
