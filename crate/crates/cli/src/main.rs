mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::Common;
use error::{CliError, Result};

/// Estimate a fixed point of a chaotic map and learn a controller that holds it.
#[derive(Debug, Parser)]
#[command(name = "nafchaos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Config file (TOML), or a manifest.toml from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Root seed; overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the fixed point from an uncontrolled orbit and write the region.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train controllers; writes the learning curve and one checkpoint per run.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Region file from `estimate` [default: <out>/region.toml].
        #[arg(long)]
        region: Option<PathBuf>,
    },
    /// Greedy closed-loop response of a trained controller.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Initial state, comma separated [default: evaluate.x0].
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x0: Option<Vec<f64>>,
        /// [default: evaluate.steps]
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Control input over a lattice covering the region.
    Surface {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Points per axis [default: surface.grid_resolution].
        #[arg(long)]
        resolution: Option<usize>,
    },
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            out: a.out,
            seed: a.seed,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate { common } => commands::estimate(&common.into()),
        Command::Train { common, region } => commands::train(&common.into(), region.as_deref()),
        Command::Evaluate {
            common,
            checkpoint,
            x0,
            steps,
        } => commands::evaluate(&common.into(), &checkpoint, x0, steps),
        Command::Surface {
            common,
            checkpoint,
            resolution,
        } => commands::surface(&common.into(), &checkpoint, resolution),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.category());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(&CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
