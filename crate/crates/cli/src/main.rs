//! `proxysteer` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::ClientKind;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or config file. Exit status 2.
    #[error("config: {0}")]
    Config(String),
    /// Failure while doing the work. Exit status 1.
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    /// The message with its cause chain, skipping causes whose text the
    /// previous message already ends with.
    fn render(&self) -> String {
        let Self::Runtime(e) = self else {
            return self.to_string();
        };
        let mut parts: Vec<String> = Vec::new();
        for cause in e.chain() {
            let text = cause.to_string();
            if !parts.last().is_some_and(|p| p.ends_with(&text)) {
                parts.push(text);
            }
        }
        parts.join(": ")
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "proxysteer",
    version,
    about = "Proxy-guided factual steering of language models"
)]
struct Cli {
    /// Config file (TOML). Falls back to $PROXYSTEER_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to runs/<command>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a split training dataset from source QA records.
    Augment(AugmentArgs),
    /// Train the HDP, then refine the FAP.
    Train(TrainArgs),
    /// Generate with the target model steered by the proxies.
    Decode(DecodeArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Print a decoding trace and optionally re-check every step.
    InspectTrace(InspectArgs),
    /// Write the planted-fact toy task and optionally run the full experiment.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Source records (JSONL: id, question, correct_answer, optional hallucinated_answer).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output dataset (JSONL); defaults to <run-dir>/dataset.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    client: Option<ClientKind>,
    /// Comma-separated subset of paraphrase,perturb,external.
    #[arg(long, value_delimiter = ',')]
    ops: Option<Vec<String>>,
    /// External questions, one per line.
    #[arg(long)]
    external: Option<PathBuf>,
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset (JSONL) with train and val splits.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Base proxy model file.
    #[arg(long)]
    base: Option<PathBuf>,
    /// FAP refinement rounds.
    #[arg(long)]
    k: Option<usize>,
    /// Epochs per refinement round.
    #[arg(long)]
    epochs: Option<usize>,
    /// FAP learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hdp_epochs: Option<usize>,
    #[arg(long)]
    hdp_lr: Option<f64>,
    /// Ablation flags: no_iterative, no_guidance, no_negative.
    #[arg(long, value_delimiter = ',')]
    ablation: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    prompt: Option<String>,
    /// Prompts, one per line.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Dataset (JSONL) whose questions are decoded.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Provider spec: table:<file>, lm:<model>[+<adapter>] or a URL.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    fap: Option<String>,
    #[arg(long)]
    hdp: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// greedy or temperature:<tau>.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Trace JSONL path; a directory when several prompts are decoded.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions (JSONL: id, prediction).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Dataset (JSONL).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Keyword specs (JSONL: id, gt_keywords, hal_keywords).
    #[arg(long)]
    specs: Option<PathBuf>,
    /// Optional external hallucination scorer.
    #[arg(long)]
    scorer_url: Option<String>,
    /// Row label in the rendered table.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Trace file (JSONL).
    trace: PathBuf,
    /// Recompute every step from the recorded logits and compare bit-exactly.
    #[arg(long)]
    replay: bool,
    /// Print one line per step.
    #[arg(long)]
    steps: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Train the proxies and score every ablation wiring.
    #[arg(long)]
    experiment: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.render());
            ExitCode::from(e.exit_code())
        }
    }
}
