//! `gatedrag` command-line entry point.
//!
//! Exit status: 0 on success, 2 for bad arguments or unreadable inputs,
//! 1 for failures while running.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Marks an error as caused by the user's arguments or input files.
#[derive(Debug)]
pub struct InputError(String);

impl InputError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// Reclassifies any error as an input error, keeping its message chain.
pub trait InputContext<T> {
    fn input(self) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> InputContext<T> for Result<T, E> {
    fn input(self) -> anyhow::Result<T> {
        self.map_err(|e| {
            let e: anyhow::Error = e.into();
            InputError::new(format!("{e:#}")).into()
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "gatedrag", version, about = "Gated retrieval-augmented QA with skill routing")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every randomized step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index from a JSON-lines corpus.
    Index(IndexArgs),
    /// Generate labeled hidden-state samples for prober training.
    ProbeData(ProbeDataArgs),
    /// Train the layer-prober ensemble from dumped samples.
    TrainProber(TrainProberArgs),
    /// Run the gated pipeline over a dataset.
    Run(RunArgs),
    /// Score episode logs against a dataset.
    Eval(EvalArgs),
    /// Cluster and compare embedding conditions.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Where to write the index.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Scripted mock file to replay instead of a live backend.
    #[arg(long, conflicts_with = "backend_url")]
    pub replay: Option<PathBuf>,
    /// Base URL of the generation sidecar.
    #[arg(long)]
    pub backend_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProbeDataArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Where to write the samples (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub few_shot: Option<PathBuf>,
    #[arg(long)]
    pub few_shot_k: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Use only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainProberArgs {
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Where to write the ensemble.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional per-layer training report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    /// Disable inverse-frequency class weights.
    #[arg(long)]
    pub no_balance: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub max_skill_rounds: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub evidence_cap: Option<usize>,
    /// Gate threshold; defaults to the ensemble's own.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub few_shot_k: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub router_max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Separate sidecar for routing and skill calls.
    #[arg(long)]
    pub router_url: Option<String>,
    #[arg(long)]
    pub few_shot: Option<PathBuf>,
    /// Where to write episode logs (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional batch summary (JSON).
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Episodes run concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Drop hidden vectors from the written logs.
    #[arg(long)]
    pub no_vectors: bool,
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub logs: Option<PathBuf>,
    /// Dataset name in the report; defaults to the dataset file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Optional report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputKind {
    /// Episode logs written by `run`.
    Episodes,
    /// Samples written by `probe-data`.
    Samples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleCondition {
    NoRetrieval,
    SingleStepRetrieval,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// `LABEL=PATH`, repeated once per condition in order.
    #[arg(long = "condition", value_name = "LABEL=PATH", required = true)]
    pub conditions: Vec<String>,
    #[arg(long, value_enum, default_value_t = InputKind::Episodes)]
    pub kind: InputKind,
    /// Gold answers for episode inputs.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Keep episodes still wrong after this round.
    #[arg(long)]
    pub after_round: Option<usize>,
    /// Layer of sample inputs; defaults to the deepest.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_enum)]
    pub sample_condition: Option<SampleCondition>,
    /// Keep only samples with this label.
    #[arg(long)]
    pub sample_label: Option<u8>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report (CSV).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Directory for per-condition coordinate CSVs.
    #[arg(long)]
    pub coords_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
