use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use marlbar::harness::{parse_seeds, run_command};
use marlbar::{Command, HarnessError, RunSpec};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Train,
    Eval,
    Verify,
    AblateGammaB,
    AblateBeta,
    Smoke,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::Verify => Command::Verify,
            Cmd::AblateGammaB => Command::AblateGammaB,
            Cmd::AblateBeta => Command::AblateBeta,
            Cmd::Smoke => Command::Smoke,
        }
    }
}

/// Train, evaluate and certify barrier-constrained multi-agent policies.
///
/// Config keys can be overridden with MB_<SECTION>_<KEY> environment
/// variables, e.g. MB_TRAIN_EPOCHS=200.
#[derive(Debug, Parser)]
#[command(name = "marlbar", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// Sectioned key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; ranges like 0-4 are allowed.
    #[arg(long, default_value = "0")]
    seeds: String,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let spec = RunSpec {
        command: cli.command.into(),
        config: cli.config,
        out: cli.out,
        seeds: parse_seeds(&cli.seeds)?,
    };
    for line in run_command(&spec)?.lines {
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = Command::from(cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {command} failed: {e}");
            ExitCode::FAILURE
        }
    }
}
