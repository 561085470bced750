mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Task-augmented active meta-learning for few-shot patch classification.
#[derive(Parser, Debug)]
#[command(name = "agile", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON config; fields it omits keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and every method row's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent of the per-run result directories.
    #[arg(long, global = true, default_value = "results")]
    pub out_dir: PathBuf,
    /// Name of the run directory; defaults to `<command>-seed<seed>-<unix time>`.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Start from the single-core defaults (32x32 patches, 2000 meta iterations).
    #[arg(long, global = true)]
    pub desk_scale: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Meta-train θ on the meta tasks and write checkpoints.
    MetaTrain {
        #[arg(long, value_enum, default_value_t = Source::Augmented)]
        source: Source,
        /// Continue from a checkpoint directory until the configured iteration count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adapt θ to every real task with a random labeled sample and report the curve.
    Adapt {
        #[command(flatten)]
        theta: ThetaArgs,
        /// Labeled samples per task: a count or a percentage like `1%`.
        #[arg(long, default_value = "1%")]
        samples: String,
    },
    /// Run the active-labeling loop with oracle labels on every real task.
    Active {
        #[command(flatten)]
        theta: ThetaArgs,
        /// Label budget per task: a count or a percentage like `1%`.
        #[arg(long, default_value = "1%")]
        budget: String,
        #[arg(long, value_enum, default_value_t = StrategyArg::Entropy)]
        strategy: StrategyArg,
    },
    /// Run the method grid and write metrics and curves.
    Bench {
        /// Comma-separated subset of methods, e.g. `maml,agile_phase1`.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Run one method at several training sizes.
    Sweep {
        #[arg(long, default_value = "agile_phase2")]
        method: String,
        /// Comma-separated budgets, e.g. `16,160` or `1%,10%`.
        #[arg(long, default_value = "1%,10%")]
        sizes: String,
    },
    /// Re-export the results of a previous run.
    Export {
        /// Run directory holding `runs.json`.
        run: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long, value_enum, default_value_t = Table::Metrics)]
        table: Table,
        /// Output file; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Start the annotation service.
    Serve {
        #[command(flatten)]
        theta: ThetaArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// Directory of task directories to serve instead of the synthetic real tasks.
        #[arg(long)]
        tasks_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ThetaArgs {
    /// Checkpoint directory of a meta-trained θ; meta-trains first when omitted.
    #[arg(long)]
    pub theta: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Base,
    Augmented,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyArg {
    Entropy,
    Random,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    Metrics,
    Curves,
}

/// Failures split by exit code: 2 for usage, 1 for everything at run time.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<agile_core::error::Error> for Failure {
    fn from(e: agile_core::error::Error) -> Self {
        use agile_core::error::Error as E;
        match e {
            E::Parameter(_) | E::Usage(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

pub fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
