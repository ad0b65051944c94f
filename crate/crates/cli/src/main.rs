mod commands;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "rgpo", version, about = "Rejection-gated policy optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    /// Key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub algorithm: Option<String>,
    #[arg(long)]
    pub gate: Option<String>,
    #[arg(long)]
    pub env: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy per seed and summarize.
    Train(TrainArgs),
    /// Write gate/weight curves and weight histograms.
    Gatescan {
        /// Comma-separated gate specs, e.g. `sigmoid:5,identity_is`. Defaults to the five standard gates.
        #[arg(long, value_delimiter = ',')]
        gates: Vec<String>,
        #[arg(long, default_value_t = 0.0)]
        r_min: f64,
        #[arg(long, default_value_t = 3.0)]
        r_max: f64,
        #[arg(long, default_value_t = 301)]
        points: usize,
        /// Draws per weight histogram.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a bound check: bias, variance, heavy_tail, improvement, reinforce or all.
    Theory {
        check: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gate for the check; the bias check cycles sigmoid k = 2, 5, 20 by default.
        #[arg(long)]
        gate: Option<String>,
        /// Pareto tail index of the ratios.
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000,1000000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the alignment bandit for each algorithm and seed.
    Align {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated algorithms; all four by default, or the config's when one is given.
        #[arg(long, value_delimiter = ',')]
        algorithms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per value of one config key.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Gatescan { gates, r_min, r_max, points, samples, seed, out } => {
            commands::gatescan(&gates, r_min, r_max, points, samples, seed, &out)
        }
        Command::Theory { check, trials, seed, gate, alpha, sizes, samples, delta, scale, out } => {
            let opts = commands::TheoryOptions { trials, seed, gate, alpha, sizes, samples, delta, scale };
            commands::theory(&check, &opts, &out)
        }
        Command::Align { config, algorithms, seeds, out } => commands::align(config.as_deref(), &algorithms, &seeds, &out),
        Command::Sweep { param, values, train } => commands::sweep(&param, &values, &train),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
