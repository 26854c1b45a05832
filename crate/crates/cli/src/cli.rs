use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mda_core::routing::Stack;
use mda_core::synth::DEFAULT_GLOBAL_SEED;
use mda_core::train::{BackboneMode, SweepAxis};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (git ", env!("MDA_GIT_REV"), ")");

#[derive(Debug, Parser)]
#[command(name = "mda", version = VERSION, about = "Modular domain adaptation for a streaming conformer transducer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/test splits for the shipped domain presets.
    GenData(GenDataArgs),
    /// Train a backbone on one domain, or on several with a domain one-hot.
    TrainBackbone(TrainBackboneArgs),
    /// Train one domain's parameters against a frozen backbone.
    TrainDomain(TrainDomainArgs),
    /// Greedy-decode a test split and report token error rates.
    Eval(EvalArgs),
    /// Run one sweep axis against a frozen backbone.
    Sweep(SweepArgs),
    /// Count parameters of model components.
    Params(ParamsArgs),
    /// Inspect, compare and compose parameter bundles.
    #[command(subcommand)]
    Ckpt(CkptCommand),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Bundled model preset.
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"], conflicts_with = "config")]
    pub preset: String,
    /// Model configuration JSON (overrides --preset).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Seed for batch order and decoder selection.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability of training the causal decoder on a step.
    #[arg(long)]
    pub causal_prob: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Utterances per domain when the corpus is generated.
    #[arg(long, default_value_t = 4000)]
    pub train_count: usize,
    /// Seed of the shared token prototypes.
    #[arg(long, default_value_t = DEFAULT_GLOBAL_SEED)]
    pub global_seed: u64,
    /// Read the corpus from a JSON-lines split instead of generating it.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DecoderArg {
    Causal,
    Noncausal,
}

impl From<DecoderArg> for Stack {
    fn from(d: DecoderArg) -> Self {
        match d {
            DecoderArg::Causal => Stack::Causal,
            DecoderArg::Noncausal => Stack::NonCausal,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    SingleDomain,
    MultidomainOnehot,
}

impl From<ModeArg> for BackboneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::SingleDomain => BackboneMode::SingleDomain,
            ModeArg::MultidomainOnehot => BackboneMode::MultidomainOnehot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RecipeArg {
    /// Parallel adapters on causal FFN sites plus non-causal ffn_end overrides.
    Final,
    /// Parallel adapters on every FFN site.
    PaFfn,
    /// Overrides of both FFN modules in every non-causal block.
    NcFfn,
    /// Overrides of both FFN modules in every causal block.
    CFfn,
    /// Overrides of ffn_end in every non-causal block.
    NcFfnEnd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    PerBlock,
    PerModule,
    AdapterGrid,
    Recipe,
    Decoder,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::PerBlock => SweepAxis::PerBlock,
            AxisArg::PerModule => SweepAxis::PerModule,
            AxisArg::AdapterGrid => SweepAxis::AdapterGrid,
            AxisArg::Recipe => SweepAxis::Recipe,
            AxisArg::Decoder => SweepAxis::Decoder,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = ["yt-like".to_string(), "vs-like".into(), "dt-like".into()])]
    pub domains: Vec<String>,
    #[arg(long, default_value_t = 4000)]
    pub train_count: usize,
    #[arg(long, default_value_t = 500)]
    pub test_count: usize,
    #[arg(long, default_value_t = DEFAULT_GLOBAL_SEED)]
    pub global_seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainBackboneArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "single-domain")]
    pub mode: ModeArg,
    /// Backbone domain (single-domain mode).
    #[arg(long, default_value = "yt-like")]
    pub domain: String,
    /// Domains of the one-hot, in one-hot order (multidomain mode).
    #[arg(long, value_delimiter = ',', default_values_t = ["yt-like".to_string(), "vs-like".into(), "dt-like".into()])]
    pub domains: Vec<String>,
    #[arg(long, default_value_t = 16)]
    pub onehot_width: usize,
}

#[derive(Debug, Args)]
pub struct TrainDomainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone bundle.
    #[arg(long)]
    pub backbone: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub domain: String,
    /// Domain plan JSON.
    #[arg(long, conflicts_with = "recipe", required_unless_present = "recipe")]
    pub plan: Option<PathBuf>,
    /// Built-in plan.
    #[arg(long, value_enum)]
    pub recipe: Option<RecipeArg>,
    #[arg(long, default_value_t = 16)]
    pub bottleneck: usize,
    /// Seed of the fresh domain parameters (built-in plans).
    #[arg(long, default_value_t = 0)]
    pub plan_seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    /// Domain bundles to compose with the backbone.
    #[arg(long = "domain-bundle")]
    pub domain_bundles: Vec<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Test-split domain.
    #[arg(long)]
    pub domain: String,
    /// Domain to route through; defaults to --domain when it is composed,
    /// else the backbone.
    #[arg(long)]
    pub route: Option<String>,
    #[arg(long, value_enum, default_value = "noncausal")]
    pub decoder: DecoderArg,
    #[arg(long, default_value_t = 500)]
    pub test_count: usize,
    #[arg(long, default_value_t = DEFAULT_GLOBAL_SEED)]
    pub global_seed: u64,
    /// Read the test split from a JSON-lines file instead of generating it.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write the report and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    #[arg(long)]
    pub domain: String,
    #[arg(long, default_value_t = 4000)]
    pub train_count: usize,
    #[arg(long, default_value_t = 500)]
    pub test_count: usize,
    #[arg(long, default_value_t = DEFAULT_GLOBAL_SEED)]
    pub global_seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32])]
    pub bottlenecks: Vec<usize>,
    #[arg(long, value_enum, default_value = "noncausal")]
    pub decoder: DecoderArg,
    #[arg(long, default_value_t = 0)]
    pub plan_seed: u64,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Print the table as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Component: ffn_start, mhsa, conv, ffn_end, block-K, encoder, all,
    /// prediction or joint. Without it, prints a summary table.
    #[arg(long)]
    pub select: Option<String>,
    #[arg(long, default_value = "noncausal")]
    pub stack: String,
    /// Adapter widths for the summary table.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256])]
    pub bottlenecks: Vec<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum CkptCommand {
    /// Print a bundle's manifest.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Keys added, removed and changed from A to B.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Compose a backbone with domain bundles and report the routing.
    Compose {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long = "domain-bundle")]
        domain_bundles: Vec<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        /// Write the composition manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}
