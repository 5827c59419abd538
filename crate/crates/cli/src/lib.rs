//! The `ngcov` command line. All logic lives here so tests can drive it
//! in-process; `main.rs` only sets up logging and exits with [`run`]'s code.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files. Exit code 1.
    Config(String),
    /// The model backend failed or lacks a capability. Exit code 2.
    Backend(String),
    /// Scores could not be evaluated. Exit code 3.
    Eval(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Eval(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
            CliError::Eval(m) => write!(f, "evaluation error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ngcov_core::Error> for CliError {
    fn from(e: ngcov_core::Error) -> Self {
        if e.is_backend() {
            CliError::Backend(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ngcov", version, about = "Membership inference from sampled continuations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every candidate with the coverage attack.
    Attack(AttackArgs),
    /// Run a logprob or paraphrase-quiz baseline.
    Baseline(BaselineArgs),
    /// Build or reshape candidate datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Vary one hyperparameter and record AUROC per value.
    Ablation(AblationArgs),
    /// Pick the best attack config on a validation split.
    Sweep(SweepArgs),
    /// Inspect or clear the generation cache.
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Serve the configured backend over the completion HTTP protocol.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Membership threshold; writes hard predictions when given.
    #[arg(long, allow_hyphen_values = true)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Print the planned requests and token budget without sampling.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// loss, rloss, zlib, mink or decop.
    #[arg(long)]
    pub method: String,
    /// K values for mink, as start:end:step or a comma list.
    #[arg(long)]
    pub k_grid: Option<String>,
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Old/new page pairs to a member/non-member dataset.
    WikiHard(WikiHardArgs),
    /// Length-balance a member and a non-member set.
    LengthMatch(LengthMatchArgs),
    /// Split off a validation set.
    Split(SplitArgs),
    /// Random pseudo-word corpus for the memorizer.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct WikiHardArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub min_words: usize,
    #[arg(long, default_value_t = 0.5)]
    pub min_edit: f64,
    #[arg(long, default_value_t = 0.2)]
    pub max_len_diff: f64,
    #[arg(long, default_value_t = 256)]
    pub truncate_words: usize,
    #[arg(long)]
    pub sample_n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LengthMatchArgs {
    /// A labeled dataset holding both classes.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub members: Option<PathBuf>,
    #[arg(long)]
    pub nonmembers: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.05)]
    pub trim: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub validation_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub members: usize,
    #[arg(long, default_value_t = 200)]
    pub nonmembers: usize,
    #[arg(long, default_value_t = 120)]
    pub words: usize,
    #[arg(long, default_value_t = 5000)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// num-samples, prefix-ratio or temperature.
    #[arg(long)]
    pub axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Metrics to score; defaults to the config's metric.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Also run the winning config on the held-out part.
    #[arg(long)]
    pub test: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    Inspect(CacheArgs),
    Clear(CacheArgs),
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    /// Cache directory; taken from the config when omitted.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Only this model's file.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8000")]
    pub bind: String,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ngcov: {e}");
            e.exit_code()
        }
    }
}
