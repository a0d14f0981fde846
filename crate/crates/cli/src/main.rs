//! `recos`: initialize, train, evaluate and analyze LeNet-5 RECOS networks
//! on MNIST.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recos::{InitScheme, Rectifier};

use crate::config::{ExperimentConfig, Overrides};
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "recos", version, about = "LeNet-5 as cascaded RECOS transforms on MNIST")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory with the MNIST IDX files.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// kmeans or random.
    #[arg(long, global = true)]
    init: Option<InitScheme>,
    /// sigmoid, relu, prelu:SLOPE or trelu:PHI.
    #[arg(long, global = true)]
    rectifier: Option<Rectifier>,
    /// Stratified training subset size.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build LeNet-5 and initialize it; writes init.recos and init_report.csv.
    Init,
    /// Train a checkpoint (or a fresh initialization); writes trained.recos,
    /// history.csv and orientation.csv.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the test set; writes metrics.csv and confusion.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also report accuracy of the raw decision rule under both
        /// node→label mappings.
        #[arg(long)]
        unsupervised: bool,
    },
    /// Accuracy vs. number of labeled samples; writes curve.csv and curve.svg.
    Curve,
    /// TReLU threshold sweep; writes sweep.csv.
    Sweep,
    /// Cluster statistics, anchor gallery and sub-class report.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let CommonArgs {
        config,
        data_dir,
        out_dir,
        seed,
        init,
        rectifier,
        samples,
        threads,
    } = cli.common;
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("--threads {n}: {e}")))?;
    }
    let cfg = ExperimentConfig::resolve(
        config.as_deref(),
        Overrides {
            data_dir,
            out_dir,
            seed,
            init,
            rectifier,
            samples,
        },
    )?;
    match cli.command {
        Command::Init => commands::init(&cfg),
        Command::Train { checkpoint } => commands::train(&cfg, checkpoint.as_deref()),
        Command::Eval { checkpoint, unsupervised } => commands::eval(&cfg, &checkpoint, unsupervised),
        Command::Curve => commands::curve(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Analyze { checkpoint } => commands::analyze(&cfg, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
