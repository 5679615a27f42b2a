mod commands;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use slowfast::layout::BudgetCheck;
use slowfast::synthetic_env::Variant;

#[derive(Debug, Parser)]
#[command(name = "slowfast", version, about = "Slow-fast video layouts, zoom-in episodes, synthetic GRPO training and CoT cleaning")]
struct Cli {
    /// TOML config file; falls back to $SLOWFAST_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest (default: next to --out, else stderr).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Prompt templates.
    Template {
        #[command(subcommand)]
        action: TemplateAction,
    },
    /// Multi-step zoom-in episodes.
    Episode {
        #[command(subcommand)]
        action: EpisodeAction,
    },
    /// Train the synthetic policy under one RL variant.
    Train(TrainArgs),
    /// Chain-of-thought dataset cleaning.
    Cots {
        #[command(subcommand)]
        action: CotsAction,
    },
}

#[derive(Debug, Subcommand)]
enum TemplateAction {
    /// Print the slow-fast prompt line for a video and its zoomed clips.
    Render(TemplateArgs),
}

#[derive(Debug, Subcommand)]
enum EpisodeAction {
    /// Run one episode and write its trace as a JSON line.
    Run(EpisodeArgs),
}

#[derive(Debug, Subcommand)]
enum CotsAction {
    /// Apply the accuracy and format filters, normalize times, attach prefixes.
    Filter(FilterArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BudgetFlag {
    Strict,
    Off,
}

impl From<BudgetFlag> for BudgetCheck {
    fn from(b: BudgetFlag) -> Self {
        match b {
            BudgetFlag::Strict => BudgetCheck::Strict,
            BudgetFlag::Off => BudgetCheck::Off,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct LayoutOverrides {
    #[arg(long, value_enum)]
    budget_check: Option<BudgetFlag>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    fps_fast: Option<f64>,
}

#[derive(Debug, Args)]
struct TemplateArgs {
    /// Video length in seconds.
    #[arg(long)]
    duration: f64,
    /// Zoomed clips as start:end pairs in seconds, comma separated.
    #[arg(long, value_delimiter = ',')]
    clips: Vec<String>,
    #[arg(long, default_value = "video")]
    source_id: String,
    /// Write the prompt here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    layout: LayoutOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Scripted,
    Synthetic,
    Remote,
}

#[derive(Debug, Args)]
struct EpisodeArgs {
    #[arg(long, value_enum)]
    backend: BackendKind,
    /// One scripted response per line.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// JSON with `duration_s`, optional `source_id`, and `question`.
    #[arg(long)]
    question_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trained parameters for the synthetic backend (zeros if absent).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Argmax instead of sampling for the synthetic backend.
    #[arg(long)]
    greedy: bool,
    /// Remote endpoint, overriding [remote].url.
    #[arg(long)]
    url: Option<String>,
    /// Trace output (JSONL); stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    layout: LayoutOverrides,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for metrics.jsonl, summary.csv, params.json and eval.json.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    mix_ratio: Option<f64>,
    #[arg(long)]
    eval_instances: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// CoT records, one JSON object per line.
    #[arg(long = "in")]
    input: PathBuf,
    /// Cleaned records.
    #[arg(long)]
    out: PathBuf,
    /// Ground truth by record id (JSONL); otherwise each record's question is used.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Filter report (JSON); also printed to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(failure::exit_code(&err))
        }
    }
}
