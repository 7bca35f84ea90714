//! `latent-evi`: simulation studies, one-shot estimation, rolling analysis and
//! property checks.
//!
//! Exit status: 0 on success, 1 on runtime failure or a violated check,
//! 2 on usage or configuration errors.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "latent-evi", version, about = "Extreme value index estimation for latent components")]
struct Cli {
    /// Worker threads (default: all cores). Never changes results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print progress information to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a Monte Carlo study described by a JSON scenario.
    Simulate(SimulateArgs),
    /// Unmix a CSV matrix and estimate the index of every component.
    Estimate(EstimateArgs),
    /// Rolling-window tail estimates for series and their latent factors.
    Rolling(RollingArgs),
    /// Run the order-statistic property batteries and a rate diagnostic.
    Check(CheckArgs),
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Bundled scenario name (paper-sec5, paper-appB) or path to a JSON file.
    #[arg(long)]
    pub scenario: String,
    /// Override the number of replications.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Override the sample sizes (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Override the scenario seed.
    #[arg(long, env = "LATENT_EVI_SEED")]
    pub seed: Option<u64>,
    /// Output directory (default: out/<scenario name>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one row per replicate to records.csv.
    #[arg(long)]
    pub records: bool,
}

#[derive(Debug, clap::Args)]
pub struct EstimateArgs {
    /// CSV with a header row; a column named `date` is ignored.
    #[arg(long)]
    pub input: PathBuf,
    /// fobi, amuse[:LAG], sobi[:MAX | :L1,L2,...] or none.
    #[arg(long, default_value = "fobi")]
    pub unmixer: String,
    /// Tail size rule: sqrt, log, K, fixed:K or power:A.
    #[arg(long, default_value = "sqrt")]
    pub tail: String,
    #[arg(long, value_delimiter = ',', default_value = "hill,moment")]
    pub methods: Vec<String>,
    /// Directory for estimates.json and estimates.csv.
    #[arg(long, default_value = "out/estimate")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InputKind {
    Prices,
    Returns,
}

#[derive(Debug, clap::Args)]
pub struct RollingArgs {
    /// CSV with a header row, one ISO date column and one or more series.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "prices")]
    pub input_kind: InputKind,
    #[arg(long, default_value_t = 60)]
    pub window: usize,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Tails to trace: left, right, abs.
    #[arg(long, value_delimiter = ',', default_value = "left,right")]
    pub tails: Vec<String>,
    #[arg(long, default_value = "hill")]
    pub method: String,
    /// Unmixer for the latent factors (sobi = lags 1..12), or none.
    #[arg(long, default_value = "sobi")]
    pub factors: String,
    /// Skip the unit-variance standardization of each series.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, default_value = "out/rolling")]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct CheckArgs {
    /// Random instances per order-statistic battery.
    #[arg(long, default_value_t = 10_000)]
    pub instances: usize,
    #[arg(long, env = "LATENT_EVI_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Also print the rate diagnostic of a bundled scenario or JSON file.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Swap in a deliberately broken order statistic (harness self-test).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid input/config: exit 2.
    Config(String),
    /// Failure while running, or a violated property: exit 1.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a, cli.verbose),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Rolling(a) => commands::rolling(&a),
        Command::Check(a) => commands::check(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => eprintln!("failed: {m}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
