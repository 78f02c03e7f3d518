//! The `tcf` command line: data generation, training, evaluation, attacks,
//! checkpoint averaging, ensembling and reporting.

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use report::{render_report, ReportRow};

use crate::advtrain::TrainMode;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "tcf", version, about = "Cross-modal fusion VQA with adversarial training")]
pub struct Cli {
    /// Worker threads for evaluation; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus `--set key=value` overrides.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset (three splits plus manifest).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes config copy, metrics log, per-epoch snapshots
    /// and the final checkpoint into the run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Accuracy of one checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Write per-example predictions here.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Model id recorded in the dump.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean and attacked accuracy under the embedding attack.
    AttackEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Average the newest k snapshots of a run.
    Average {
        /// Snapshot directory (a run's `snapshots/`).
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Majority vote over checkpoints, or over existing prediction dumps.
    Ensemble {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Vote over these dumps instead of running models.
        #[arg(long = "from-dump")]
        from_dumps: Vec<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy table (method rows by split columns) from prediction dumps.
    Report {
        /// `NAME=DUMP[,DUMP...]`; one row per flag, in order.
        #[arg(long = "row", value_name = "NAME=DUMPS")]
        rows: Vec<String>,
        /// `NAME=METRICS_LOG`; final losses are included in the report.
        #[arg(long = "log", value_name = "NAME=LOG")]
        logs: Vec<String>,
        /// Directory receiving report.txt and report.json.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse and execute; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    commands::dispatch(cli)
}

/// Entry point shared by the binary and in-process tests. Returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
