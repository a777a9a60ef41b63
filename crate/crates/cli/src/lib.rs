//! The `psttl` command line: data generation, the three training stages,
//! evaluation and ablation grids, each writing a manifest next to its outputs.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod config;
pub mod manifest;

pub use commands::run;

#[derive(Debug, Parser)]
#[command(name = "psttl", version, about = "Prototype-based soft-label test-time learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train M_base on the base split.
    TrainBase(DataArgs),
    /// Extend M_base with novel classes and fine-tune on the balanced split.
    Finetune(InitArgs),
    /// Test-time learning from M_novel on the test stream.
    Ttl(TtlArgs),
    /// Score a checkpoint or a predictions file on the test split.
    Eval(EvalArgs),
    /// Run a grid of TTL variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the experiment seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Starting checkpoint.
    #[arg(long)]
    pub init: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    OneEpoch,
    OneBatch,
}

#[derive(Debug, Args)]
pub struct TtlArgs {
    #[command(flatten)]
    pub init: InitArgs,
    /// Overrides the strategy of the config.
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to run frozen inference with.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub init: Option<PathBuf>,
    /// Predictions file written by `ttl`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// TOML file of `[[variant]]` tables.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command. Printed as one JSON line on stderr.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Failure { kind, message: message.into() }
    }

    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }

    /// Process exit status: 2 for bad input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            "usage" | "config" | "parse" | "input" => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for Failure {}

impl From<psttl::Error> for Failure {
    fn from(e: psttl::Error) -> Self {
        use psttl::Error as E;
        let kind = match &e {
            E::Config(_) | E::ShotCount { .. } | E::MissingClass(_) | E::InsufficientInstances { .. } => "config",
            E::Parse { .. } => "parse",
            E::Io { .. } => "io",
            E::Diverged { .. } => "diverged",
            E::SceneMismatch { .. } | E::UnknownClass(_) | E::Dimension { .. } | E::Shape(_) => "input",
            _ => "runtime",
        };
        Failure::new(kind, e.to_string())
    }
}
