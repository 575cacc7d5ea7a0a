use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hopf_rtoc_cli::commands::{self, Outcome};
use hopf_rtoc_cli::config::RunConfig;
use hopf_rtoc_cli::CliError;

#[derive(Parser)]
#[command(name = "hopf-rtoc", version, about = "Minimum-time planning and channel-seeking simulation")]
struct Cli {
    /// TOML run configuration; omitted keys take the default scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// No progress messages on standard error.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum time from `x0` to the goal; prints one JSON record.
    Mintime,
    /// Fit the channel to a measurement CSV and write the mean/variance grid.
    Channel {
        /// CSV with header `x_m,y_m,cnr_db`.
        #[arg(long)]
        measurements: PathBuf,
    },
    /// Run the closed-loop scenario and write trajectory, grids and summary.
    Simulate,
}

fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Mintime => commands::mintime(&cfg),
        Command::Channel { measurements } => commands::channel(&cfg, measurements, &cli.out),
        Command::Simulate => commands::simulate(&cfg, &cli.out, cli.quiet),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            println!("{}", outcome.record);
            ExitCode::from(outcome.exit)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
