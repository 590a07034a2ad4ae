//! `flowrag` command-line tools and HTTP service.

pub mod commands;
pub mod config;
pub mod service;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use flowrag::eval::{RecallMode, SuggestionMode};
use flowrag::generator::GeneratorKind;
use flowrag::pipeline::{DEFAULT_K_STEPS, DEFAULT_K_TABLES};
use flowrag::trainer::NegativeStrategy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "flowrag", version, about = "Retrieval-augmented workflow generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic catalog with train and test splits.
    Datagen(DatagenArgs),
    /// Catalog maintenance.
    #[command(subcommand)]
    Catalog(CatalogCommand),
    /// Train the retriever encoder and write a checkpoint.
    TrainRetriever(TrainArgs),
    /// Encode the catalog into step and table index files.
    BuildIndex(BuildIndexArgs),
    /// Print the top suggestions for a query, one `name<TAB>score` per line.
    Retrieve(RetrieveArgs),
    /// Generate a workflow for a query and print it as JSON.
    Generate(GenerateArgs),
    /// Evaluate a labeled split and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 50)]
    pub tables: usize,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    /// Number of common steps, taken as the most frequent in the train split.
    #[arg(long, default_value_t = 10)]
    pub common: usize,
}

#[derive(Debug, Subcommand)]
pub enum CatalogCommand {
    /// Check the catalog and any labeled splits next to it.
    Validate {
        #[arg(long)]
        data_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Training split; defaults to `<data-dir>/train.jsonl`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Negative strategy (random, bm25, hard); repeat to combine. Default: all.
    #[arg(long = "strategy")]
    pub strategies: Vec<NegativeStrategy>,
    #[arg(long)]
    pub refresh_period: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Files needed to serve retrieval.
#[derive(Debug, Args, Clone)]
pub struct RetrieverArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index_dir: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ListKind {
    Step,
    Table,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub files: RetrieverArgs,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = DEFAULT_K_STEPS)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = ListKind::Step)]
    pub kind: ListKind,
}

#[derive(Debug, Args, Clone)]
pub struct GeneratorArgs {
    #[arg(long, value_parser = parse_generator_kind, default_value = "oracle")]
    pub generator: GeneratorKind,
    /// Base URL of a completion server (remote generator).
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 512)]
    pub max_tokens: u32,
    /// Oracle only: invent a `<word>_table` name when no table is suggested.
    #[arg(long)]
    pub table_fallback: bool,
}

fn parse_generator_kind(s: &str) -> Result<GeneratorKind, String> {
    match s {
        "oracle" => Ok(GeneratorKind::Oracle),
        "remote" => Ok(GeneratorKind::Remote),
        other => Err(format!("unknown generator {other:?} (expected oracle or remote)")),
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub files: RetrieverArgs,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = DEFAULT_K_STEPS)]
    pub k_steps: usize,
    #[arg(long, default_value_t = DEFAULT_K_TABLES)]
    pub k_tables: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Labeled split (JSONL).
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index_dir: PathBuf,
    /// Catalog directory; defaults to the split's parent directory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write per-sample records as JSONL.
    #[arg(long)]
    pub per_sample: Option<PathBuf>,
    #[arg(long, default_value = "fraction")]
    pub recall_mode: RecallMode,
    /// Suggestions shown to the generator: retrieved, gold or none.
    #[arg(long, default_value = "retrieved")]
    pub suggestions: SuggestionMode,
    #[arg(long, default_value_t = DEFAULT_K_STEPS)]
    pub k_steps: usize,
    #[arg(long, default_value_t = DEFAULT_K_TABLES)]
    pub k_tables: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML config; defaults to `$FLOWRAG_CONFIG`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured bind address.
    #[arg(long)]
    pub bind: Option<String>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
