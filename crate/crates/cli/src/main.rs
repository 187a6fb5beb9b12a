//! `pathprune`: batch front end for dataset generation, filter training,
//! pruning, supernet training, search and reporting.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "pathprune", version, about = "FLOPs-bucketed path filtering, search-space pruning and constrained search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SourceArg {
    Oracle,
    Supernet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    /// Filter-gated training on the pruned space.
    Ours,
    /// Uniform sampling over the whole space.
    Uniform,
    /// Uniform sampling over the depth/width-coupled space.
    Coupled,
    /// All three, one after the other.
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    FlopsUniform,
    FlopsScorePerBucket,
    FlopsScoreAll,
}

#[derive(Subcommand)]
enum Command {
    /// Sample paths per FLOPs bucket and label them with validation losses.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "oracle")]
        source: SourceArg,
        /// Paths per bucket.
        #[arg(long)]
        m: usize,
        /// Trained supernet checkpoint (supernet source); a fresh one is warmed up otherwise.
        #[arg(long)]
        supernet: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the path filter with the bucket-restricted ranking loss.
    TrainFilter {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Filter checkpoint to continue from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair accuracy and weak-path detection metrics of a filter on a dataset.
    EvalFilter {
        #[arg(long)]
        filter: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
        /// Write the metrics here (with a manifest) instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score operations, prune them and compute per-bucket path thresholds.
    Prune {
        #[arg(long)]
        filter: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        r_op: Option<f64>,
        #[arg(long)]
        r_op1: Option<f64>,
        #[arg(long)]
        r_op2: Option<f64>,
        #[arg(long)]
        r_path: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the supernet (gated by a filter, or a baseline) into a run directory.
    TrainSupernet {
        #[arg(long)]
        config: PathBuf,
        /// Reuse this prune state (needs --filter) instead of running the filter stages.
        #[arg(long)]
        prune: Option<PathBuf>,
        #[arg(long)]
        filter: Option<PathBuf>,
        /// Main-phase epochs (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value = "ours")]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolutionary search under a FLOPs budget with the filter as proxy.
    Search {
        #[arg(long)]
        filter: PathBuf,
        #[arg(long)]
        prune: PathBuf,
        /// Budget in MFLOPs.
        #[arg(long)]
        budget: f64,
        /// Extra budgets for a score/FLOPs sweep.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV table; the full results go to the same path with a .json extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-bucket mean test loss of every method in a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, source, m, supernet, out } => commands::gen_data(&config, source, m, supernet.as_deref(), &out),
        Command::TrainFilter { config, data, pretrained, out } => commands::train_filter(&config, &data, pretrained.as_deref(), &out),
        Command::EvalFilter { filter, data, ratio, out } => commands::eval_filter(&filter, &data, ratio, out.as_deref()),
        Command::Prune { filter, config, strategy, r_op, r_op1, r_op2, r_path, out } => {
            commands::prune(&filter, &config, commands::PruneOverrides { strategy, r_op, r_op1, r_op2, r_path }, &out)
        }
        Command::TrainSupernet { config, prune, filter, epochs, method, out } => {
            commands::train_supernet(&config, prune.as_deref(), filter.as_deref(), epochs, method, &out)
        }
        Command::Search { filter, prune, budget, sweep, config, out } => {
            commands::search(&filter, &prune, budget, &sweep, config.as_deref(), &out)
        }
        Command::Report { run, out } => commands::report(&run, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("off")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or(""));
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
