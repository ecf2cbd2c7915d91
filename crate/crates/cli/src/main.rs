//! `fairser`: synthetic corpora, enrolment, training, prediction and
//! fairness reporting for personalised emotion recognition.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or contract error,
//! 3 numerical failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use fairser_core::corpus::{Split, Variant};
use fairser_core::fairness::IswfMode;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Clap(clap::Error),
    Core(fairser_core::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(fairser_core::Error::Io {
            context: path.display().to_string(),
            source: e,
        })
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Clap(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Clap(e) => write!(f, "{}", e.render().to_string().trim_end()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<fairser_core::Error> for CliError {
    fn from(e: fairser_core::Error) -> Self {
        CliError::Core(e)
    }
}

/// Comma-separated list; the empty string is the empty list.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fairser",
    version,
    about = "Personalised emotion recognition with speaker-level fairness metrics"
)]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value file of default flags; command-line flags take precedence
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus
    Synth(SynthArgs),
    /// Build per-speaker enrolment sets
    Enroll(EnrollArgs),
    /// Train one model variant
    Train(TrainArgs),
    /// Predict labels for one split
    Predict(PredictArgs),
    /// Compute a fairness report from predictions
    Evaluate(EvaluateArgs),
    /// Export ISWF curves of several prediction files as CSV
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Speakers in the train, dev and test splits
    #[arg(long, default_value = "6,2,8")]
    pub speakers: List<usize>,
    #[arg(long, default_value_t = 40)]
    pub per_speaker: usize,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub class_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub offset_scale: f64,
    /// Share of the speaker offset common to all classes, in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    pub offset_sharing: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub neutral_prob: f64,
    #[arg(long, env = "FAIRSER_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Only this split; all splits when omitted
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Required for persn, perse and persa
    #[arg(long)]
    pub enrolment: Option<PathBuf>,
    /// base, persn, perse or persa
    #[arg(long)]
    pub variant: Variant,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub d_emb: usize,
    #[arg(long, default_value = "64")]
    pub encoder_hidden: List<usize>,
    #[arg(long, default_value = "32")]
    pub classifier_hidden: List<usize>,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Learned query, key, value and output projections
    #[arg(long)]
    pub projections: bool,
    /// Keep enrolment utterances in the training and dev pools
    #[arg(long)]
    pub include_enrolled: bool,
    #[arg(long, env = "FAIRSER_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Training log CSV; defaults to `<out>.log.csv`
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Required for personalised models
    #[arg(long)]
    pub enrolment: Option<PathBuf>,
    #[arg(long)]
    pub include_enrolled: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct MetricArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    /// atkinson, or paper for the verbatim form with 1/N outside the power
    #[arg(long, default_value = "atkinson")]
    pub iswf_mode: IswfMode,
    /// Comma-separated alpha values; the default grid spans 0 to 100
    #[arg(long)]
    pub alpha_grid: Option<List<f64>>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[command(flatten)]
    pub metric: MetricArgs,
    /// Bootstrap resamples; 0 omits the interval
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, env = "FAIRSER_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Prediction files, one curve each
    #[arg(required = true)]
    pub predictions: Vec<PathBuf>,
    /// Column names; defaults to base,persn,perse,persa for four files,
    /// otherwise the file stems
    #[arg(long)]
    pub names: Option<List<String>>,
    #[command(flatten)]
    pub metric: MetricArgs,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

/// Boolean flags, which config files set with `true` or `false`.
const SWITCHES: &[&str] = &["projections", "include-enrolled"];

fn run(args: Vec<OsString>) -> Result<(), CliError> {
    let args = config::expand_args(args, SWITCHES)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Clap(e)),
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Enroll(a) => commands::enroll(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Sweep(a) => commands::sweep(&a),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Clap(_)) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
        Err(e) => {
            eprintln!("fairser: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
