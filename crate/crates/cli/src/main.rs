//! `coderag`: index a Python repository, complete code, evaluate, emit
//! distillation data and time the pipeline stages.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Overrides;

#[derive(Parser, Debug)]
#[command(name = "coderag", version, about = "Retrieval-augmented repository-level code completion")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build kb.jsonl, manifest.json, sparse.idx and dense.vec for a repository.
    Index(IndexArgs),
    /// Complete the tasks in a task file and print the completions.
    Complete(CompleteArgs),
    /// Score completions against ground truth (EM, ES, identifier EM/F1).
    Evaluate(EvaluateArgs),
    /// Emit consistency-filtered picker training samples from retrieval lists.
    Distill(DistillArgs),
    /// Mean wall-clock seconds per pipeline stage over a dataset.
    BenchTimings(BenchArgs),
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    /// Repository root to index.
    #[arg(long)]
    pub repo: PathBuf,
    /// Output directory for the index files.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub settings: Overrides,
}

#[derive(Args, Debug)]
pub struct IndexLocation {
    /// Directory written by `coderag index`.
    #[arg(long, conflicts_with = "index_root")]
    pub index: Option<PathBuf>,
    /// Directory holding one index directory per task `repo` value.
    #[arg(long)]
    pub index_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    /// Task file: one JSON task per line ({task_id, repo, file, prefix, cursor_line}).
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub location: IndexLocation,
    /// Write per-task query, retrieval list, rerank outcome, prompt and config here.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    /// Also write the dataflow graph of each task as DOT into the dump.
    #[arg(long, requires = "dump_dir")]
    pub dot: bool,
    #[command(flatten)]
    pub settings: Overrides,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Task file with ground truth.
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub location: IndexLocation,
    /// Where to write the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write every task's retrieval list as one JSON line (input for `distill`).
    #[arg(long)]
    pub lists_out: Option<PathBuf>,
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Overrides,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    /// Retrieval lists, one JSON object per line.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output JSONL of samples.
    #[arg(long)]
    pub out: PathBuf,
    /// Index the candidate ids refer to.
    #[arg(long)]
    pub index: PathBuf,
    /// Subset sizes, comma separated [default: 2,3,4,5,6,7].
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Reorder each subset before every vote.
    #[arg(long)]
    pub shuffle_votes: bool,
    #[command(flatten)]
    pub settings: Overrides,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub location: IndexLocation,
    #[command(flatten)]
    pub settings: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Index(a) => commands::index(a),
        Command::Complete(a) => commands::complete(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Distill(a) => commands::distill(a),
        Command::BenchTimings(a) => commands::bench_timings(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("coderag: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
