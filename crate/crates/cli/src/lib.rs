//! Argument parsing and dispatch for the `actkd` binary.
//!
//! [`run`] takes the full argument vector and returns the process exit code,
//! so the whole command surface can be driven in-process.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod workspace;

pub use workspace::{ensure_config, Workspace};

/// Exit code for command-line usage errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for configuration validation failures.
pub const EXIT_CONFIG: i32 = 3;

/// Knowledge distillation with actor-critic knowledge selection.
#[derive(Parser, Debug)]
#[command(name = "actkd", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration source shared by every training command.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long, short = 'c', visible_alias = "spec", value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set ksm.lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Training seed (same as `--set seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory (same as `--set out_dir=PATH`).
    #[arg(long, value_name = "PATH")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset as TSV files.
    MakeData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seed of the generator (overrides `data.seed`).
        #[arg(long = "data-seed", visible_alias = "generator-seed")]
        data_seed: Option<u64>,
    },
    /// Train the teacher on the ground-truth labels.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the knowledge selection module over several distillation episodes.
    TrainKsm {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint [default: <out_dir>/teacher/teacher.ckpt].
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
    },
    /// Distill a student with a trained, frozen knowledge selection module.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
        /// KSM checkpoint [default: <out_dir>/ksm/ksm.ckpt].
        #[arg(long, value_name = "PATH")]
        ksm: Option<PathBuf>,
        /// Action mode; defaults to the mode the KSM was trained with.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Evaluate a model checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Dev)]
        split: Split,
    },
    /// Distillation with fixed or random knowledge weights.
    Baseline {
        #[command(subcommand)]
        kind: Baseline,
    },
    /// Train and distill at every point of the configured hyperparameter grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
        /// Worker threads (overrides `sweep.threads`).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Convert a metrics log into CSV columns for one metric.
    PlotExtract {
        /// Metrics log (JSON Lines).
        #[arg(long, value_name = "PATH")]
        log: PathBuf,
        /// Flattened metric name, e.g. `dev_accuracy`, `reward`, `losses_1`.
        #[arg(long)]
        metric: String,
        /// Output CSV file [default: stdout].
        #[arg(long, short, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum Baseline {
    /// The same weights at every step.
    Fixed {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
        /// Comma-separated finetune,response,feature,relation weights
        /// (overrides `baseline.fixed_weights`).
        #[arg(long, value_name = "W,W,W,W")]
        weights: Option<String>,
    },
    /// Fresh random weights at every step.
    RandomAll(RandomArgs),
    /// Random weights during the first epoch, unit weights afterwards.
    RandomOne(RandomArgs),
}

#[derive(Args, Debug)]
pub struct RandomArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "PATH")]
    pub teacher: Option<PathBuf>,
    /// Number of trials (overrides `baseline.trials`).
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Soft)]
    pub mode: Mode,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Soft,
    Hard,
}

impl From<Mode> for actkd::ksm::ActionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Soft => actkd::ksm::ActionMode::Soft,
            Mode::Hard => actkd::ksm::ActionMode::Hard,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Raised for invalid flag values detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Whether any error in the chain is a configuration problem.
fn is_config_error(err: &anyhow::Error) -> bool {
    use actkd::{
        data::DataError, engine::EngineError, ksm::KsmError, losses::LossError, models::ModelError,
    };
    err.chain().any(|cause| {
        cause.is::<ConfigError>()
            || matches!(
                cause.downcast_ref(),
                Some(actkd::persist::PersistError::Config(_))
            )
            || cause
                .downcast_ref::<actkd::Error>()
                .is_some_and(actkd::Error::is_config)
            || cause
                .downcast_ref::<EngineError>()
                .is_some_and(EngineError::is_config)
            || matches!(cause.downcast_ref(), Some(KsmError::Config(_)))
            || matches!(cause.downcast_ref(), Some(ModelError::Config(_)))
            || matches!(cause.downcast_ref(), Some(DataError::Config(_)))
            || matches!(cause.downcast_ref(), Some(LossError::Config(_)))
    })
}

/// The error chain joined with `: `, skipping causes already quoted by
/// their parent, with all whitespace collapsed.
fn one_line(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Failures print a one-line diagnostic to stderr.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            if is_config_error(&e) {
                EXIT_CONFIG
            } else {
                1
            }
        }
    }
}
