//! `gmner-agent`: command-line frontend.
//!
//! Exit codes: 0 success, 2 configuration error, 3 upstream-service error,
//! 4 validation failure.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gmner-agent", version, about = "Agentic grounded multimodal NER toolkit")]
pub struct Cli {
    /// TOML run configuration; omitted keys take their defaults. Flags
    /// override it, and `[paths]` supplies any file flag left out.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run data-parallel stages on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the search gateway over HTTP until interrupted.
    ServeTools(ServeTools),
    /// Roll out a policy over a corpus, one trajectory or one group per post.
    Rollout(Rollout),
    /// Sample the policy N times per post and assign per-entity search tags.
    TagGen(TagGen),
    /// Synthesise and validate tag-conditioned cold-start trajectories.
    SecotBuild(SecotBuild),
    /// Attach hybrid rewards to trajectories.
    Reward(Reward),
    /// Emit GRPO training records (advantages, span maps, masks).
    GrpoBatch(GrpoBatch),
    /// Score predictions or trajectories against gold.
    Eval(Eval),
    /// Summarise cold-start records and rollouts as markdown.
    Report(Report),
}

#[derive(Debug, Args)]
pub struct ServeTools {
    /// `local:<index>` or `external:<adapter>`.
    #[arg(long)]
    pub tools: Option<String>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Persistent cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Results per query.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Rollout {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `scripted:<path>`, `replay:<path>` or `remote:<url>`.
    #[arg(long)]
    pub policy: Option<String>,
    /// `local:<index>`, `external:<adapter>` or `http://host:port`.
    #[arg(long)]
    pub tools: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tool-call budget per trajectory.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub max_invalid_retries: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    /// One trajectory per post instead of a group.
    #[arg(long, conflicts_with = "group_size")]
    pub single: bool,
    /// JSONL file whose `id` fields select the posts to roll out.
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Extra line placed before the post in the prompt.
    #[arg(long)]
    pub instruction: Option<String>,
}

#[derive(Debug, Args)]
pub struct TagGen {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<String>,
    /// Writes tags.jsonl, cold_start.jsonl and rl_pool.jsonl here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Forward samples per post.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SecotBuild {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Tag reports from tag-gen.
    #[arg(long)]
    pub tags: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<String>,
    #[arg(long)]
    pub tools: Option<String>,
    /// Writes secot.jsonl, secot_stats.md and sft_gold.jsonl here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Extra attempts for rejected samples.
    #[arg(long)]
    pub resample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Reward {
    #[arg(long)]
    pub rollouts: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda_search: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GrpoBatch {
    /// Rewarded trajectories from `reward`.
    #[arg(long)]
    pub rewarded: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Gmner,
    Mner,
    Eeg,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnseenArg {
    Mention,
    MentionType,
    MentionGrounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Md,
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Prediction records (`{"id", "entities"}`) or trajectories.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Defaults to `all`.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Train corpus; adds seen and unseen rows.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Defaults to `mention`.
    #[arg(long, value_enum)]
    pub unseen: Option<UnseenArg>,
    /// Defaults to `md`.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Report {
    /// Cold-start records from secot-build.
    #[arg(long)]
    pub secot: Option<PathBuf>,
    /// Trajectories, rewarded or not.
    #[arg(long)]
    pub rollouts: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
