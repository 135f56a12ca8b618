use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "glass", version, about = "Training-free global-local FFN sparsification pipeline")]
#[command(after_help = "Exit codes: 0 ok, 1 I/O, 2 validation, 3 provenance or integrity, 4 verify failure.\n\
Thread count: GLASS_THREADS (defaults to the number of cores).")]
pub struct Cli {
    /// JSON object of flag values; explicit flags win. Keys are long flag
    /// names; a nested object under the subcommand name takes precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialize a seeded model and write it as a model artifact.
    GenModel(GenModelArgs),
    /// Generate a Null Prompt Stimulation corpus from a model.
    Nps(NpsArgs),
    /// Compute local or global importance statistics.
    Stats(StatsArgs),
    /// Build a per-layer neuron mask.
    Mask(MaskArgs),
    /// Compare dense and sparsified models on documents.
    Eval(EvalArgs),
    /// Sweep densities, methods and seeds; write CSV.
    Sweep(SweepArgs),
    /// Run the built-in oracle checks and print a pass/fail table.
    Verify(VerifyArgs),
    /// Write planted-drift documents generated by a model.
    GenDocs(GenDocsArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// JSON model spec; inline flags override its fields.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    /// FFN width m.
    #[arg(long)]
    pub ffn_width: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// Up-projection activation: identity, relu, silu or gelu_tanh.
    #[arg(long)]
    pub phi_u: Option<String>,
    /// Gate activation: silu, sigmoid or identity.
    #[arg(long)]
    pub phi_g: Option<String>,
    #[arg(long)]
    pub norm_eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Planted units per layer, e.g. "1,2;3" (layers separated by ';').
    #[arg(long, conflicts_with = "planted_count")]
    pub planted: Option<String>,
    /// Plant this many seeded random units in every layer.
    #[arg(long)]
    pub planted_count: Option<usize>,
    /// Column scale applied to planted units' up and gate weights.
    #[arg(long, default_value_t = glass_core::model::DEFAULT_PLANTED_SCALE)]
    pub planted_scale: f64,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NpsArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Generated tokens per document, after the leading BOS.
    #[arg(long, default_value_t = 128)]
    pub length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub warmup_tokens: usize,
    #[arg(long, default_value_t = 1.5)]
    pub warmup_temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Additive logit penalty for repeated bigrams during warm-up.
    #[arg(long, default_value_t = glass_core::model::HARD_EXCLUSION, allow_negative_numbers = true)]
    pub bigram_penalty: f64,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Local,
    GlobalAct,
    GlobalImpact,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["corpus", "prompt_file"])))]
pub struct StatsArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Corpus artifact (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Prompt as whitespace- or comma-separated token ids (local only).
    #[arg(long, value_name = "FILE")]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Write the per-layer impact-locality table (global-impact only).
    #[arg(long, value_name = "FILE")]
    pub locality_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum TieArg {
    #[default]
    LowerIndexRanksLower,
    LowerIndexRanksHigher,
}

impl From<TieArg> for glass_core::aggregation::TiePolicy {
    fn from(t: TieArg) -> Self {
        match t {
            TieArg::LowerIndexRanksLower => Self::LowerIndexRanksLower,
            TieArg::LowerIndexRanksHigher => Self::LowerIndexRanksHigher,
        }
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("budget").required(true).args(["k", "density"])))]
pub struct MaskArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// local, global-act, global-impact, a-glass, i-glass or oracle.
    #[arg(long)]
    pub method: String,
    #[arg(long, value_name = "FILE")]
    pub local_stats: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub global_stats: Option<PathBuf>,
    /// Units kept per layer.
    #[arg(long)]
    pub k: Option<usize>,
    /// Fraction of units kept; k = round(density * m).
    #[arg(long)]
    pub density: Option<f64>,
    /// Weight of the local ranks in [0, 1]; fused methods only [default: 0.5].
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum, default_value_t)]
    pub tie_policy: TieArg,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["mask", "methods"])))]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Corpus artifact whose documents supply prompts and oracle sets.
    #[arg(long, value_name = "FILE")]
    pub docs: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub prompt_len: usize,
    /// Fixed mask files, comma-separated; each is applied to every document.
    #[arg(long, value_name = "FILES", value_delimiter = ',')]
    pub mask: Vec<PathBuf>,
    /// Methods whose masks are rebuilt from each document's prompt.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long, value_name = "FILE")]
    pub global_act_stats: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub global_impact_stats: Option<PathBuf>,
    /// Budget for --methods.
    #[arg(long, conflicts_with = "density")]
    pub k: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Add the oracle row and Jaccard-to-oracle columns.
    #[arg(long)]
    pub with_oracle: bool,
    /// Tokens kept by the top-K KL divergence [default: min(vocab/2, 100)].
    #[arg(long)]
    pub topk: Option<usize>,
    /// Reference continuation length [default: rest of each document].
    #[arg(long)]
    pub gen_len: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub tie_policy: TieArg,
    #[arg(long, value_name = "FILE")]
    pub out_report: Option<PathBuf>,
    /// Metrics in the sweep layout (density, method, metric, mean, stderr).
    #[arg(long, value_name = "FILE")]
    pub out_csv: Option<PathBuf>,
    /// Jaccard-to-oracle table, one row per method and one column per layer.
    #[arg(long, value_name = "FILE")]
    pub out_radar: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// "a..b[:step]" (inclusive, step 0.1 by default) or a comma list.
    #[arg(long, default_value = "0.1..0.9")]
    pub densities: String,
    #[arg(long, value_delimiter = ',', default_value = "local,global-act,a-glass,i-glass")]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub lambdas: Vec<f64>,
    /// "a..b" (end exclusive) or a comma list.
    #[arg(long, default_value = "0..20")]
    pub seeds: String,
    #[arg(long)]
    pub topk: Option<usize>,
    /// Across-seed means and standard errors.
    #[arg(long, value_name = "FILE")]
    pub out_csv: PathBuf,
    /// One row per seed, density, method and metric.
    #[arg(long, value_name = "FILE")]
    pub per_seed_csv: Option<PathBuf>,
    /// Sweep this model instead of building the drift fixture per seed.
    #[arg(long, value_name = "FILE", requires = "docs")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "model")]
    pub docs: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "model")]
    pub global_act_stats: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "model")]
    pub global_impact_stats: Option<PathBuf>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    /// Drift documents per seed.
    #[arg(long)]
    pub documents: Option<usize>,
    #[arg(long)]
    pub doc_len: Option<usize>,
    #[arg(long)]
    pub topic_len: Option<usize>,
    #[arg(long)]
    pub topic_vocab: Option<usize>,
    #[arg(long)]
    pub planted_count: Option<usize>,
    #[arg(long)]
    pub nps_count: Option<usize>,
    #[arg(long)]
    pub nps_length: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Oracles,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "oracles")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale analytic gradients by (1 + EPS) before checking them.
    #[arg(long, value_name = "EPS", hide = true)]
    pub perturb_gradient: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDocsArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 200)]
    pub doc_len: usize,
    /// Leading tokens (BOS included) drawn from a small per-document set.
    #[arg(long, default_value_t = 40)]
    pub topic_len: usize,
    #[arg(long, default_value_t = 3)]
    pub topic_vocab: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}
