mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use drad_core::sek::PolicyName;

const POLICIES: [&str; 5] = ["nor", "srr", "flr", "tpr", "drad"];

#[derive(Debug, Parser)]
#[command(name = "drad", version, about = "Entity-level hallucination detection with retrieval-based self-correction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every random choice, including sampled generation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Emit machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,

    /// Log level for stderr diagnostics (off, error, warn, info, debug, trace).
    #[arg(long, global = true, value_name = "LEVEL")]
    pub log_level: Option<log::LevelFilter>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index from a corpus.
    Index(IndexArgs),
    /// Answer one question under a retrieval policy and print the run as JSON.
    Generate(GenerateArgs),
    /// Score the entities of recorded traces and print one JSON verdict per entity.
    Detect(DetectArgs),
    /// Evaluate detectors or a policy on a dataset.
    Evaluate(EvaluateArgs),
    /// Evaluate several policies on the same QA dataset.
    ComparePolicies(CompareArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// JSON-lines file of {title, text} or a directory of text files.
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    /// Directory to write the index into.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Overrides shared by every command that runs a policy.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    /// Index directory built by `drad index`.
    #[arg(long, value_name = "DIR")]
    pub index: Option<PathBuf>,
    /// Mock gateway script (JSON).
    #[arg(long, value_name = "FILE")]
    pub mock_script: Option<PathBuf>,
    /// Token budget per question.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Probability threshold below which an entity is flagged.
    #[arg(long)]
    pub theta1: Option<f64>,
    /// Query window half-width in tokens.
    #[arg(long)]
    pub m: Option<usize>,
    /// Passages retrieved per invocation.
    #[arg(long)]
    pub k: Option<usize>,
}

fn policy_parser() -> impl TypedValueParser<Value = PolicyName> {
    PossibleValuesParser::new(POLICIES).map(|s| s.parse::<PolicyName>().expect("listed policy"))
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub question: String,
    #[arg(long, value_parser = policy_parser())]
    pub policy: PolicyName,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// JSON-lines trace file.
    #[arg(long, value_name = "FILE")]
    pub trace: PathBuf,
    /// Probability threshold below which an entity is flagged.
    #[arg(long)]
    pub theta1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Detection,
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnswerModeArg {
    Pattern,
    Boolean,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Dataset file; defaults to `dataset` from the config.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Policy for the qa task.
    #[arg(long, value_parser = policy_parser(), default_value = "drad")]
    pub policy: PolicyName,
    /// How answers are read from the output (qa task).
    #[arg(long, value_enum)]
    pub answer_mode: Option<AnswerModeArg>,
    /// Questions evaluated at once.
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    /// Also write the JSON report to this file.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// QA dataset file; defaults to `dataset` from the config.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Comma-separated policies to compare.
    #[arg(long, value_parser = policy_parser(), value_delimiter = ',', default_value = "nor,srr,flr,tpr,drad")]
    pub policies: Vec<PolicyName>,
    #[arg(long, value_enum)]
    pub answer_mode: Option<AnswerModeArg>,
    /// Questions evaluated at once.
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    /// Also write the JSON report to this file.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
}

pub enum Failure {
    /// Bad arguments or config; exit code 1.
    Usage(String),
    /// Anything that went wrong while doing the work; exit code 2.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn subcommand_help(args: &[OsString]) -> Option<String> {
    let mut cmd = Cli::command();
    cmd.build();
    let name = args
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find(|a| cmd.find_subcommand(a).is_some())?
        .to_string();
    Some(cmd.find_subcommand_mut(&name)?.render_help().to_string())
}

fn run(args: Vec<OsString>) -> u8 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 1,
                _ => {
                    if let Some(help) = subcommand_help(&args) {
                        eprintln!("\n{help}");
                    }
                    1
                }
            };
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            if let Some(help) = subcommand_help(&args) {
                eprintln!("\n{help}");
            }
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect()))
}
