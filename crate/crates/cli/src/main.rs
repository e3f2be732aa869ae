//! `petalnet` command-line interface.

mod commands;
mod config;
mod probs_csv;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "petalnet", version, about = "Train, fuse and evaluate small convnet ensembles on synthetic flowers")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its split manifest.
    GenData {
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Destination directory (default `<output_dir>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured base classifiers.
    TrainBase {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train only the named bases (repeatable).
        #[arg(long = "base")]
        bases: Vec<String>,
    },
    /// Fine-tune the meta-classifier head over frozen base checkpoints.
    TrainMeta {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use only the named bases (repeatable, at least two).
        #[arg(long = "base")]
        bases: Vec<String>,
    },
    /// Print the metrics JSON of a base checkpoint or a meta-classifier.
    Eval {
        /// A base `.dfl` checkpoint or a `meta.json`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Combine probability CSV files with a fusion strategy.
    Fuse {
        #[arg(long, default_value = "average")]
        strategy: String,
        /// Probability CSV files, one row per sample.
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Per-model validation accuracies for the `accuracy` strategy.
        #[arg(long, value_delimiter = ',')]
        accuracies: Vec<f64>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the learning-rate schedule as a `step,rate` CSV.
    LrPreview {
        #[arg(long, default_value_t = 30)]
        steps: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare bases, fused ensemble and meta-classifier on one split.
    Report {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }
}

impl From<petalnet::Error> for CliError {
    fn from(e: petalnet::Error) -> Self {
        let kind = match e {
            petalnet::Error::Config(_) => ErrorKind::Config,
            petalnet::Error::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

fn fail(err: CliError) -> ExitCode {
    eprintln!("{}", json!({ "error": err.kind.as_str(), "message": err.message }));
    ExitCode::from(err.kind.exit_code())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(dir) = cli.output_dir {
        config.output_dir = dir;
    }
    if cli.dump_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::config("no subcommand given (try --help)"));
    };
    match command {
        Command::GenData { seed, out } => commands::gen_data(&config, seed, out),
        Command::TrainBase { data, bases } => commands::train_base(&config, data, &bases),
        Command::TrainMeta { data, bases } => commands::train_meta(&config, data, &bases),
        Command::Eval { model, data, split } => commands::eval(&config, &model, data, &split),
        Command::Fuse {
            strategy,
            inputs,
            accuracies,
            out,
        } => commands::fuse(&strategy, &inputs, &accuracies, out),
        Command::LrPreview { steps, out } => commands::lr_preview(&config, steps, out),
        Command::Report { data, split } => commands::report(&config, data, &split),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            return fail(CliError::config(first.trim_start_matches("error: ")));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
