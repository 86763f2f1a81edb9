use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "refocus", version, about = "Iterative spatio-temporal perception: evaluation, rewards and data tools")]
pub struct Cli {
    /// Log filter used when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the perception loop over a dataset and write traces and a report.
    RunEval(RunEvalArgs),
    /// Run one record and print its trace as JSON.
    Episode(EpisodeArgs),
    /// Score completions against a dataset and compute group advantages.
    Rewards(RewardsArgs),
    /// Check records against the schema and media bounds.
    Validate(ValidateArgs),
    /// Print corpus counts per task and source.
    Stats(StatsArgs),
    /// Filter records with a judge model.
    Judge(JudgeArgs),
    /// Serve a scripted mock chat endpoint.
    MockServe(MockServeArgs),
    /// Rebuild a metric report from stored traces.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Base URL of an OpenAI-compatible endpoint, e.g. http://127.0.0.1:8000/v1.
    #[arg(long, conflicts_with = "mock_script")]
    pub endpoint: Option<String>,
    /// Model name sent with every request.
    #[arg(long, default_value = "default")]
    pub model: String,
    /// Environment variable holding a bearer token.
    #[arg(long)]
    pub auth_env: Option<String>,
    #[arg(long, default_value_t = 120_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    /// Upper bound on concurrent requests to the endpoint.
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
    /// Answer from a JSON mock script in-process instead of an endpoint.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FramesMode {
    /// Decode with ffmpeg.
    Ffmpeg,
    /// Deterministic placeholder images; no decoding.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeMode {
    Ffprobe,
    /// Trust duration and dimensions stated in the dataset.
    Inline,
}

#[derive(Debug, Clone, Args)]
pub struct MediaArgs {
    #[arg(long, value_enum, default_value_t = FramesMode::Ffmpeg)]
    pub frames: FramesMode,
    #[arg(long, value_enum, default_value_t = ProbeMode::Ffprobe)]
    pub probe: ProbeMode,
    /// Directory that relative media paths are resolved against.
    #[arg(long)]
    pub media_root: Option<PathBuf>,
    /// Frame extraction command with {input}, {timestamp}, {width}, {height}, {output}.
    #[arg(long, requires = "image_template")]
    pub frame_template: Option<String>,
    /// Image render command with {input}, {crop_width}, {crop_height}, {x}, {y}, {width}, {height}, {output}.
    #[arg(long, requires = "frame_template")]
    pub image_template: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnMalformedArg {
    ReusePreviousPlan,
    FallbackUniform,
}

#[derive(Debug, Clone, Args)]
pub struct ItpArgs {
    /// Sampling preset: main-text, train or appendix-eval.
    #[arg(long, default_value = "main-text")]
    pub preset: String,
    /// TOML file with loop settings; flags below override it.
    #[arg(long)]
    pub itp_config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub key_ratio: Option<f64>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long, value_enum)]
    pub on_malformed: Option<OnMalformedArg>,
    /// Stop early once a round repeats the previous clue.
    #[arg(long)]
    pub stop_on_repeat: bool,
    /// Leave raw model text out of traces.
    #[arg(long)]
    pub no_raw: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GqaRuleArg {
    IopAtHalf,
    IouAtHalf,
}

#[derive(Debug, Clone, Args)]
pub struct MetricArgs {
    /// Count a threshold as met only when strictly exceeded.
    #[arg(long)]
    pub strict_thresholds: bool,
    #[arg(long, value_enum, default_value_t = GqaRuleArg::IopAtHalf)]
    pub gqa_rule: GqaRuleArg,
}

#[derive(Debug, Args)]
pub struct RunEvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub concurrency: usize,
    /// Skip records that already have a complete trace in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Run even when the dataset has violations.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub media: MediaArgs,
    #[command(flatten)]
    pub itp: ItpArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Record id; defaults to the first record.
    #[arg(long)]
    pub id: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub media: MediaArgs,
    #[command(flatten)]
    pub itp: ItpArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClueMetricArg {
    Iou,
    L1,
}

#[derive(Debug, Args)]
pub struct RewardsArgs {
    /// JSONL with `id`, `completion` and optional `group` per line.
    #[arg(long)]
    pub completions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_clue: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_ans: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_fmt: f64,
    #[arg(long, value_enum, default_value_t = ClueMetricArg::Iou)]
    pub clue_metric: ClueMetricArg,
    #[arg(long, default_value_t = refocus_core::rewards::DEFAULT_ADVANTAGE_EPSILON)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Probe media files instead of trusting inline sizes.
    #[arg(long)]
    pub probe: bool,
    #[arg(long)]
    pub media_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory for kept.jsonl, dropped.jsonl and quarantined.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// JSONL with `id` and `caption` per line.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub concurrency: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    /// JSON mock script: `{"rules": [{"when": ..., "reply": ...}], "default": ...}`.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8089")]
    pub addr: SocketAddr,
    /// Delay added to every reply.
    #[arg(long, default_value_t = 0)]
    pub latency_ms: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// traces.jsonl from a previous run.
    #[arg(long)]
    pub traces: PathBuf,
    /// Report path; `.csv` and `.txt` siblings are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "main-text")]
    pub preset: String,
    #[arg(long, default_value = "unknown")]
    pub model: String,
    #[command(flatten)]
    pub metrics: MetricArgs,
}
