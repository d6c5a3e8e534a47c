//! `bias-audit` command-line front end.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use bias_audit::annotation::FusionOrder;
use bias_audit::catalog::PromptSetting;
use bias_audit::curation::Direction;
use bias_audit::preference_mining::Precedence;
use bias_audit::reward_probe::StandardizationScope;
use bias_audit::taxonomy::Gender;

#[derive(Parser)]
#[command(name = "bias-audit", version, about = "Audit social bias in video generators, reward models and preference data")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prompt set generation.
    #[command(subcommand)]
    Prompts(PromptsCommand),
    /// Label sampled frames of every video with the configured judges.
    Annotate(AnnotateArgs),
    /// Continue an interrupted run from its reply journal.
    Resume(ResumeArgs),
    /// Metric computation.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Difference between two metric reports (after minus before).
    Shift(ShiftArgs),
    /// Score image benches with a reward model and derive its biases.
    RewardProbe(RewardProbeArgs),
    /// Mine a preference dataset for gender and ethnicity preferences.
    Mine(MineArgs),
    /// Build gender-directed preference pairs from an image manifest.
    Curate(CurateArgs),
    /// Emit table and plot CSVs from reports.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum PromptsCommand {
    /// Write the prompt set for one setting as JSONL.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// person_only, ethnicity_person or ethnicity_gender.
    #[arg(long, value_parser = parse_from_str::<PromptSetting>)]
    setting: PromptSetting,
    /// Context variants per action.
    #[arg(long)]
    contexts: Option<usize>,
    /// Genders for ethnicity_gender (repeatable).
    #[arg(long = "gender", value_parser = parse_from_str::<Gender>)]
    genders: Vec<Gender>,
    /// Context catalog replacing the built-in one.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnnotateArgs {
    /// Fusion order override: frame_first or judge_first.
    #[arg(long, value_parser = parse_enum::<FusionOrder>)]
    fusion: Option<FusionOrder>,
}

#[derive(Args)]
struct ResumeArgs {
    /// Refuse to resume unless the recorded run has this id.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Aggregate annotations into a metric report.
    Compute(ComputeArgs),
}

#[derive(Args)]
struct ComputeArgs {
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    model_id: String,
    /// Report JSON; `<output>/metrics.json` or stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ShiftArgs {
    before: PathBuf,
    after: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-cell delta CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RewardProbeArgs {
    /// joint or global.
    #[arg(long, value_parser = parse_enum::<StandardizationScope>)]
    scope: Option<StandardizationScope>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    min_pairs: Option<usize>,
    /// caption_first or image_first.
    #[arg(long, value_parser = parse_enum::<Precedence>)]
    precedence: Option<Precedence>,
}

#[derive(Args, Default)]
struct CurateArgs {
    /// Image manifest JSONL; taken from the config when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// man_preferred or woman_preferred.
    #[arg(long, value_parser = parse_enum::<Direction>)]
    direction: Option<Direction>,
    /// Extra labeled pairs to append.
    #[arg(long)]
    facefree: Option<PathBuf>,
    #[arg(long)]
    shard_size: Option<usize>,
    #[arg(long)]
    images_per_gender: Option<usize>,
    /// Output directory; `<output>/pairs` when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metric report JSON (repeatable).
    #[arg(long = "metrics")]
    metrics: Vec<PathBuf>,
    /// Delta report JSON (repeatable).
    #[arg(long = "delta")]
    deltas: Vec<PathBuf>,
    /// Reward probe report JSON (repeatable).
    #[arg(long = "reward")]
    rewards: Vec<PathBuf>,
    /// Delta report paired with --scatter-reward for scatter and sensitivity data.
    #[arg(long, requires = "scatter_reward")]
    scatter_delta: Option<PathBuf>,
    #[arg(long, requires = "scatter_delta")]
    scatter_reward: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_from_str<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    match err.chain().find_map(|e| e.downcast_ref::<bias_audit::Error>()) {
        Some(e) if e.is_external() => (3, e.kind()),
        Some(e) => (2, e.kind()),
        None => (2, "error"),
    }
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

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let record = serde_json::json!({
                "error": kind,
                "message": format!("{err:#}"),
                "exit_code": code,
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
