//! `suprim`: dataset generation, labelling, training, evaluation and analyses.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "suprim", version, about = "Selection-based trajectory planning at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration; omitted keys take the desk defaults
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// First scenario seed for `gen`; RNG seed for training and sampling
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for outputs and default input locations
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Also write SVG bar charts next to the tables
    #[arg(long, global = true)]
    pub plots: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file [default: <out>/dataset.jsonl]
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Label cache written by `labels`; labels are computed in memory when omitted
    #[arg(long, value_name = "PATH")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenarios for seeds [seed, seed + count)
    Gen {
        #[arg(long)]
        count: u64,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Output file [default: <out>/dataset.jsonl]
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Score every vocabulary entry of every scenario into a label cache
    Labels {
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Output file [default: <out>/labels.bin]
        #[arg(long, value_name = "PATH")]
        labels: Option<PathBuf>,
    },
    /// Train a selector; writes <out>/checkpoint.bin and <out>/train_log.jsonl
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint path [default: <out>/checkpoint.bin]
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Ground-truth subscores of the selected entries
    Eval(ModelArgs),
    /// Best ground-truth aggregate among the top-K ranked entries
    Oracle(ModelArgs),
    /// Evaluation split into left turns, forward and right turns
    SplitEval(ModelArgs),
    /// Final-heading histogram of high-scoring entries, original and rotation-augmented
    DistHist(DataArgs),
    /// Train and evaluate one model per observation field of view
    FovSweep {
        #[arg(long, value_name = "PATH")]
        train_dataset: PathBuf,
        #[arg(long, value_name = "PATH")]
        test_dataset: PathBuf,
    },
    /// Print the selection for every scenario as JSON lines
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Box<dyn std::error::Error>),
}

impl<E: std::error::Error + 'static> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(Box::new(e))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
