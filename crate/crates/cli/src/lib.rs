//! Command-line front end: task runs, ablations, the back-door oracle and
//! gradient checks, each writing its artifacts into one output directory.

mod commands;
pub mod config;
pub mod error;
pub mod plots;

use std::ffi::OsString;
use std::path::PathBuf;

use caformer_core::heads::Task;
use clap::{Args, Parser, Subcommand};

pub use commands::gradient_report;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "caformer", version, about = "Causal patch transformer for multivariate time series")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every run; later sources win: file, `--set`, flags.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML file with run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    /// Series CSV; synthetic data is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override any config key, e.g. `--set horizon=24`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate the task named in the config.
    Train(RunArgs),
    /// Long-term forecasting run.
    Forecast(RunArgs),
    /// Imputation run.
    Impute(RunArgs),
    /// Whole-series classification run.
    Classify(RunArgs),
    /// Reconstruction-based anomaly detection run.
    Detect(RunArgs),
    /// Score a saved checkpoint without training.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast with the full model and each ablated variant over several seeds.
    Ablate(RunArgs),
    /// Compare back-door adjustment with graph surgery on random models, or
    /// check the do-calculus rules on a model file.
    VerifyBackdoor {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Model definition in TOML; requires `--x`, `--z` and `--y`.
        #[arg(long, requires_all = ["x", "z", "y"])]
        scm: Option<PathBuf>,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        z: Option<String>,
        #[arg(long)]
        y: Option<String>,
    },
    /// Compare model gradients with central differences.
    Gradcheck {
        /// Model settings; a three-dimension toy model when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write the synthetic data a run would use as CSV files.
    Synth(RunArgs),
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();

    let outcome = match cli.command {
        Command::Train(a) => commands::task_run(a, None),
        Command::Forecast(a) => commands::task_run(a, Some(Task::LongForecast)),
        Command::Impute(a) => commands::task_run(a, Some(Task::Imputation)),
        Command::Classify(a) => commands::task_run(a, Some(Task::Classification)),
        Command::Detect(a) => commands::task_run(a, Some(Task::Anomaly)),
        Command::Evaluate { checkpoint, data, out } => commands::evaluate(&checkpoint, data, out),
        Command::Ablate(a) => commands::ablate(a),
        Command::VerifyBackdoor {
            trials,
            seed,
            scm,
            x,
            z,
            y,
        } => match scm {
            Some(path) => commands::verify_rules(&path, &x.unwrap_or_default(), &z.unwrap_or_default(), &y.unwrap_or_default()),
            None => commands::verify_backdoor(trials, seed),
        },
        Command::Gradcheck {
            config,
            overrides,
            step,
            tol,
        } => commands::gradcheck(config, &overrides, step, tol),
        Command::Synth(a) => commands::synth(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
