use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod metrics;

#[derive(Parser, Debug)]
#[command(name = "speechtext", version, about = "Joint speech/text encoder-decoder: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a toy corpus and unpaired sentences.
    GenData(GenDataArgs),
    /// Run the joint speech/text pre-training loop.
    Pretrain(PretrainArgs),
    /// Fine-tune on one downstream task.
    Finetune(FinetuneArgs),
    /// Decode a split with a checkpoint and write metric reports.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every registered subgraph.
    GradAudit(GradAuditArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Previously dumped gen-data config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of utterances.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub speakers: Option<usize>,
    /// Number of unpaired sentences.
    #[arg(long)]
    pub sentences: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of updates (overrides optim.total_steps).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Corpus directory (overrides data.corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub no_speech_pt: bool,
    #[arg(long)]
    pub no_text_pt: bool,
    /// Disable the shared codebook: no mix-up, diversity or attraction terms.
    #[arg(long)]
    pub no_joint: bool,
    /// Disable masked unit prediction (and speech masking with it).
    #[arg(long)]
    pub no_mlm: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// asr | tts | vc | se | st | sid
    #[arg(long)]
    pub task: String,
    /// Pre-training checkpoint to start from.
    #[arg(long, conflicts_with = "no_init", required_unless_present = "no_init")]
    pub init: Option<PathBuf>,
    /// Start from random weights.
    #[arg(long)]
    pub no_init: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of updates (overrides finetune.optim.total_steps).
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Use only the first N pairs (overrides data.limit).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `train` for the configured corpus, otherwise a corpus directory.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Defaults to `config.toml` next to the checkpoint, if present.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report directory; defaults to `eval-<task>` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradAuditArgs {
    /// A registered subgraph name, or `all`.
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = speechtext::audit::DEFAULT_TOL)]
    pub tol: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::GradAudit(a) => commands::grad_audit(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
