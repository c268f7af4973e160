use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttsa_cli::config::{self, Overrides};
use ttsa_cli::{commands, CliError};

/// Two-timescale stochastic approximation for bilevel problems.
#[derive(Parser)]
#[command(name = "ttsa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Limiting covariances of the rescaled errors.
    Predict(Common),
    /// One trajectory to CSV.
    Run(Common),
    /// Replicated runs compared with the prediction.
    Mc(Common),
    /// Hypergradient against finite differences.
    CheckGrad(Common),
    /// Load and check a configuration without simulating.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the file).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
}

type Handler = fn(&config::Resolved) -> Result<commands::Outcome, CliError>;

fn dispatch(cli: Cli) -> Result<commands::Outcome, CliError> {
    let (common, run): (&Common, Handler) = match &cli.command {
        Command::Predict(c) => (c, commands::predict),
        Command::Run(c) => (c, commands::run),
        Command::Mc(c) => (c, commands::mc),
        Command::CheckGrad(c) => (c, commands::check_grad),
        Command::Validate(c) => (c, commands::validate),
    };
    let overrides = Overrides {
        out: common.out.clone(),
        seed: common.seed,
        replicates: common.replicates,
        threads: config::threads_from_env()?,
    };
    let resolved = config::load(&common.config, &overrides)?;
    run(&resolved)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(outcome) => {
            for p in &outcome.written {
                println!("wrote {}", p.display());
            }
            println!("{}", outcome.message);
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("ttsa: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
