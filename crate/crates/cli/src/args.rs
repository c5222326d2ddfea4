use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use negograph::config::Variant;

#[derive(Parser, Debug)]
#[command(name = "negograph", version, about = "Strategy-graph negotiation dialogue models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on `<corpus>/train.jsonl`, validating on `<corpus>/valid.jsonl`.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split, or score a saved predictions file.
    Eval(EvalArgs),
    /// Association, influence and boundary reports from an eval trace file.
    Explain(ExplainArgs),
    /// Write a synthetic corpus with planted strategy dependencies.
    Synth(SynthArgs),
    /// Negotiate with a checkpoint in the terminal.
    Chat(ChatArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Graph,
    Rnn,
    None,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Graph => Variant::Graph,
            VariantArg::Rnn => Variant::Rnn,
            VariantArg::None => Variant::None,
        }
    }
}

/// Run configuration shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured structure encoder.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding train.jsonl and valid.jsonl.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.max_epochs`.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub no_early_stop: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn file(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Valid => "valid.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "predictions"])))]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, requires = "corpus")]
    pub checkpoint: Option<PathBuf>,
    /// A predictions.jsonl written by an earlier eval.
    #[arg(long, conflicts_with_all = ["checkpoint", "corpus"])]
    pub predictions: Option<PathBuf>,
    /// Corpus directory (read with --split) or a single JSONL file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    /// Also decode seller turns and report BLEU.
    #[arg(long)]
    pub bleu: bool,
    /// Comma-separated strategy labels to score as a separate subset.
    #[arg(long, value_delimiter = ',')]
    pub strategy_labels: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// traces.json written by eval.
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Boundary label for the edge split.
    #[arg(long, default_value = "propose")]
    pub boundary: String,
    /// Number of dialogues rendered as DOT files.
    #[arg(long, default_value_t = 10)]
    pub dot_limit: usize,
    /// Edges kept per DOT rendering.
    #[arg(long, default_value_t = 40)]
    pub dot_edges: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub dialogues: usize,
    #[arg(long, default_value_t = 8)]
    pub turns: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_rate: f64,
}

#[derive(Args, Debug)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 40.0)]
    pub listed: f64,
    #[arg(long, default_value_t = 30.0)]
    pub target: f64,
    #[arg(long, default_value = "item")]
    pub title: String,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Without a checkpoint the service answers 503 to session requests.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}
