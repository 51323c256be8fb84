mod config;
mod output;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Train, evaluate and analyse GRU and Minion Recurrent Unit networks.
#[derive(Parser, Debug)]
#[command(name = "miru", version)]
struct Cli {
    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set training.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Single-task sequence classification.
    Train(ConfigArgs),
    /// Test-set accuracy of a saved model.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on this permuted task (1-based) instead of plain MNIST.
        #[arg(long)]
        task: Option<usize>,
    },
    /// Domain-incremental learning on permuted tasks.
    Cl(ConfigArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(report::GradcheckArgs),
    /// Parameter, operation and energy counts.
    Resources(report::ResourcesArgs),
    /// Histogram of update-gate (GRU) or λ (MiRU) values over a test set.
    GateHist {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model to analyse; without it the untrained initial model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Permuted task (1-based) whose test images are fed.
        #[arg(long, default_value_t = 1)]
        task: usize,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Use only the first N test images.
        #[arg(long)]
        limit: Option<usize>,
        /// CSV destination.
        #[arg(long)]
        csv: PathBuf,
    },
}

/// Why a command did not succeed; selects the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad config, bad flags or missing inputs: exit 2.
    Config(String),
    /// A check the command performs did not hold, or the run failed: exit 1.
    Failed(String),
}

impl From<miru::Error> for Failure {
    fn from(e: miru::Error) -> Self {
        match e {
            miru::Error::Config(_) | miru::Error::Load(_) => Failure::Config(e.to_string()),
            other => Failure::Failed(other.to_string()),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log = run::Log { quiet: cli.quiet };
    let result = match cli.command {
        Command::Train(a) => run::train(&a, &log),
        Command::Eval { cfg, checkpoint, task } => run::eval(&cfg, &checkpoint, task),
        Command::Cl(a) => run::cl(&a, &log),
        Command::Gradcheck(a) => report::gradcheck(&a),
        Command::Resources(a) => report::resources(&a),
        Command::GateHist {
            cfg,
            checkpoint,
            task,
            bins,
            limit,
            csv,
        } => run::gate_hist(&cfg, checkpoint.as_deref(), task, bins, limit, &csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
