use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod commands;
mod config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] ssg_core::dataset::DataError),
    #[error(transparent)]
    Model(#[from] ssg_core::model::ModelError),
    #[error(transparent)]
    Train(#[from] ssg_core::train::TrainError),
    #[error(transparent)]
    Ranking(#[from] ssg_core::ranking::RankingError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ssg", version, about = "Salience-aware scene graph generation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test scenes and detector outputs.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Salience-label statistics for a split.
    Label(LabelArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Re-rank a prediction dump by an external salience dump.
    Rerank(RerankArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Flat dotted-key JSON config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training scenes; validation and test get a tenth each.
    #[arg(long)]
    pub scenes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub thresh: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub no_isd: bool,
    #[arg(long)]
    pub no_gesa: bool,
    #[arg(long)]
    pub no_peca: bool,
    #[arg(long)]
    pub no_iterative: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also log every optimizer step.
    #[arg(long)]
    pub log_steps: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rank by predicate confidence alone.
    #[arg(long)]
    pub no_salience_rank: bool,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write the ranked triplets as JSON lines.
    #[arg(long)]
    pub dump_preds: Option<PathBuf>,
    /// Write the predicted salience matrices as JSON lines.
    #[arg(long)]
    pub dump_salience: Option<PathBuf>,
    /// Write the report with its provenance.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = ssg_core::labels::DEFAULT_SALIENCE_THRESHOLD)]
    pub thresh: f64,
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub salience: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Label(a) => commands::label(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Rerank(a) => commands::rerank(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
