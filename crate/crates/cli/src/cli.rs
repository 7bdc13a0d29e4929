use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crce_core::dataset::Category;
use crce_core::optim::OptimizerKind;
use crce_core::trainer::{CertaintyMode, NoiseSide, ParamScope, Variant};

use crate::config::{CliConfig, JudgeKind, PoolingChoice, Preset};

#[derive(Debug, Parser)]
#[command(name = "crce", version, about = "Coreference-aware concept erasure toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config file (mirrors ErasureConfig plus evaluation and client sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; each command creates its own run directory inside.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Parallel sweep cells (and evaluation workers).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Print only machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ask the LLM for coref/retain lists, one draft record per target sense.
    Generate(GenerateArgs),
    /// Serve the curation API for the UI.
    CurateServe(ServeArgs),
    /// Cosine/Euclidean distances from a target to its corefs and retains.
    AnalyzeEmbeddings(AnalyzeArgs),
    /// Fine-tune one target with the erasure loss.
    Train(TrainArgs),
    /// Five-metric evaluation of a checkpoint.
    Evaluate(EvaluateArgs),
    /// M×N grid or certainty-perturbation sweep.
    Ablate(AblateArgs),
    /// Merge evaluation reports into one comparison table.
    Report(ReportArgs),
    /// Pretrain the toy backend and write its base weights and dataset.
    ToyInit,
    #[command(hide = true)]
    RunCell(RunCellArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// One target per line; `target<TAB>category` overrides --category.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, value_parser = parse_category, default_value = "object")]
    pub category: Category,
    /// Replay recorded LLM responses instead of calling the endpoint.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value = crce_curation::DEFAULT_UI_ORIGIN)]
    pub ui_origin: String,
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncoderKind {
    Toy,
    Clip,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Record id or target name.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_enum, default_value = "toy")]
    pub encoder: EncoderKind,
    #[arg(long)]
    pub clip_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingChoice>,
    /// Measure the bundled reference table ("dog") instead of a record.
    #[arg(long)]
    pub reference: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ErasureFlags {
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long = "m")]
    pub m: Option<usize>,
    #[arg(long = "n")]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub certainty_mode: Option<CertaintyArg>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub noise_side: Option<NoiseSideArg>,
    #[arg(long, value_enum)]
    pub param_scope: Option<ScopeArg>,
    #[arg(long)]
    pub sphere_radius: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Base weights of the toy backend (pretrained in-process when absent).
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalFlags {
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long, value_enum)]
    pub judge: Option<JudgeKind>,
    #[arg(long)]
    pub judge_fixtures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[command(flatten)]
    pub erasure: ErasureFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Training run directory or a weights file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    MnGrid,
    Certainty,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    /// Axes to sweep; at least one.
    #[arg(long, value_enum, num_args = 1..)]
    pub sweep: Vec<SweepKind>,
    #[command(flatten)]
    pub erasure: ErasureFlags,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation run directories or eval_report.json files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Row labels, in input order (default: directory names).
    #[arg(long, num_args = 1..)]
    pub labels: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunCellArgs {
    #[arg(long)]
    pub spec: PathBuf,
}

macro_rules! mirror_enum {
    ($arg:ident => $target:ty { $($v:ident),* }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
        #[value(rename_all = "snake_case")]
        pub enum $arg { $($v),* }

        impl From<$arg> for $target {
            fn from(a: $arg) -> Self {
                match a { $($arg::$v => <$target>::$v),* }
            }
        }
    };
}

mirror_enum!(VariantArg => Variant { Crce, CrceFixed, CrceSphere, EsdOnly });
mirror_enum!(CertaintyArg => CertaintyMode { Llm, UniformOne, Noise });
mirror_enum!(NoiseSideArg => NoiseSide { Coref, Retain, Both });
mirror_enum!(ScopeArg => ParamScope { CrossAttentionKv, Full });
mirror_enum!(OptimizerArg => OptimizerKind { Sgd, Adam });

fn parse_category(s: &str) -> Result<Category, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|e| e.to_string())
}

impl ErasureFlags {
    pub fn apply(&self, cfg: &mut CliConfig) {
        let e = &mut cfg.erasure;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { e.$f = v.into(); })* };
        }
        set!(eta, iterations, learning_rate, m, n, variant, certainty_mode, noise_sigma, noise_side, param_scope, optimizer);
        if let Some(r) = self.sphere_radius {
            e.sphere_radius = Some(r);
        }
        if let Some(b) = &self.base {
            cfg.toy.base_weights = Some(b.clone());
        }
    }
}

impl EvalFlags {
    pub fn apply(&self, cfg: &mut CliConfig) {
        if let Some(n) = self.images {
            cfg.evaluation.images_per_prompt = n;
        }
        if let Some(j) = self.judge {
            cfg.evaluation.judge = j;
        }
        if let Some(f) = &self.judge_fixtures {
            cfg.evaluation.fixtures = Some(f.clone());
            if self.judge.is_none() {
                cfg.evaluation.judge = JudgeKind::Fixtures;
            }
        }
    }
}
