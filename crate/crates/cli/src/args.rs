use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "biasprobe", version, about = "Spurious-feature sensitivity analysis for VLM gender-bias metrics")]
pub struct Cli {
    /// TOML file with default values for any flag; flags and environment win.
    #[arg(long, global = true, env = "BIASPROBE_CONFIG")]
    pub config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train gender probes on feature-isolated inputs.
    Detect(DetectArgs),
    /// Write perturbed copies of a manifest's images.
    Perturb(PerturbArgs),
    /// Collect model responses and compute bias, Δ and β.
    Eval(EvalArgs),
    /// Run the synthetic independent/correlated experiments.
    Simulate(SimulateArgs),
    /// Verify evaluation bundles and re-emit their tables.
    Report(ReportArgs),
    /// Write a synthetic corpus or the replay fixture.
    #[command(hide = true)]
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long, env = "BIASPROBE_OUT")]
    pub out: Option<PathBuf>,
    /// Global seed.
    #[arg(long, env = "BIASPROBE_SEED")]
    pub seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, env = "BIASPROBE_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct Selection {
    /// Features to use (comma separated): color, lighting, object, background.
    #[arg(long, env = "BIASPROBE_FEATURES", value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Strengths to use (comma separated): weak, middle, strong.
    #[arg(long, env = "BIASPROBE_STRENGTHS", value_delimiter = ',')]
    pub strengths: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LightingArg {
    /// V channel only.
    Value,
    /// All three HSV channels.
    Hsv,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, env = "BIASPROBE_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    #[arg(long, env = "BIASPROBE_FEATURES", value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Benchmark name written into the table (default: manifest file stem).
    #[arg(long, env = "BIASPROBE_BENCHMARK")]
    pub benchmark: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, value_enum)]
    pub lighting: Option<LightingArg>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long, env = "BIASPROBE_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub selection: Selection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendArg {
    Replay,
    Wire,
    Synthetic,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "BIASPROBE_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Directory written by `perturb`.
    #[arg(long, env = "BIASPROBE_PERTURBED")]
    pub perturbed: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long, env = "BIASPROBE_BACKEND", value_enum)]
    pub backend: Option<BackendArg>,
    /// Base URL of the inference service (wire backend).
    #[arg(long, env = "BIASPROBE_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Response tables to replay, one per model (comma separated or repeated).
    #[arg(long, env = "BIASPROBE_REPLAY", value_delimiter = ',')]
    pub replay: Option<Vec<PathBuf>>,
    /// Prompt files (comma separated or repeated); default: bundled prompts.
    #[arg(long, env = "BIASPROBE_PROMPTS", value_delimiter = ',')]
    pub prompts: Option<Vec<PathBuf>>,
    /// Top-k depth for MaxSkew.
    #[arg(long, env = "BIASPROBE_K")]
    pub k: Option<usize>,
    /// Weight of Δ in the composite score.
    #[arg(long, env = "BIASPROBE_ALPHA")]
    pub alpha: Option<f64>,
    /// Count unparseable answers as Unsure instead of failing.
    #[arg(long, env = "BIASPROBE_LENIENT")]
    pub lenient: bool,
    /// Probe table from `detect`, for the Acc_b-versus-Δ scatter.
    #[arg(long, env = "BIASPROBE_PROBE")]
    pub probe: Option<PathBuf>,
    #[arg(long, env = "BIASPROBE_BENCHMARK")]
    pub benchmark: Option<String>,
    /// Model name for the wire backend.
    #[arg(long)]
    pub model_name: Option<String>,
    /// Per-request timeout in seconds (wire backend).
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Retries after a failed request (wire backend).
    #[arg(long)]
    pub retries: Option<u32>,
    /// Maximum images in flight (wire backend).
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CaseArg {
    Independent,
    Correlated,
    Both,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub case: CaseArg,
    /// Records per world.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of seeds, starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// An evaluation bundle, or a directory of bundles written by `eval`.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[command(flatten)]
    pub common: Common,
    /// Write only a synthetic corpus of this many images.
    #[arg(long)]
    pub corpus: Option<usize>,
    /// Image side length for `--corpus`.
    #[arg(long, default_value_t = 64)]
    pub side: u32,
}
