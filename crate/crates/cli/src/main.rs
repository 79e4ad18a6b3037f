//! `mnmt`: corpus preparation, two-stage training, distillation, decoding,
//! scoring and latency benchmarks for multilingual translation models.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ModelFlags, PlanFlags};

#[derive(Parser, Debug)]
#[command(name = "mnmt", version, about = "Multilingual translation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus operations on four-column TSV files.
    #[command(subcommand)]
    Data(DataCommand),
    /// Many-to-many pretraining, optionally followed by per-target finetuning.
    Train(TrainArgs),
    /// Many-to-one finetuning of a checkpoint on a single-target corpus.
    Finetune(FinetuneArgs),
    /// Re-targets a corpus with a teacher's beam outputs and optionally trains a student.
    Distill(DistillArgs),
    /// Beam (or pivot) decoding of a tagged corpus into a TSV.
    Decode(DecodeArgs),
    /// Corpus BLEU and exact match of a decode TSV against references.
    Eval(EvalArgs),
    /// Serial per-sentence decode latency with BLEU, as a trade-off CSV.
    Bench(BenchArgs),
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Synthetic languages that relabel one latent vocabulary.
    GenSynthetic(GenArgs),
    /// Drops pairs with an empty side, optionally keeping one target language.
    Filter(FilterArgs),
    /// Joins pivot→X and pivot→Y bitexts on the pivot side into X→Y pairs.
    PivotAlign(PivotAlignArgs),
    /// Temperature-scaled sampling over target-language groups.
    Sample(SampleArgs),
    /// Appends the target-language tag to every source.
    Tag(IoArgs),
    /// Per-direction counts and per-target data sizes.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Languages; the first is the pivot.
    #[arg(long, value_delimiter = ',', default_value = "en,de,fr,cs")]
    langs: Vec<String>,
    /// Pivot-aligned sentences per non-pivot language.
    #[arg(long, value_delimiter = ',', default_value = "1200,600,150")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 24)]
    latent_vocab: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Held-out sentences per direction.
    #[arg(long, default_value_t = 100)]
    dev_size: usize,
    /// Emit only pivot↔X pairs instead of all directions.
    #[arg(long)]
    english_centric: bool,
    #[arg(long, env = "MNMT_SEED", default_value_t = 1)]
    seed: u64,
    /// Output directory for train.tsv, dev.tsv and one .spec per language.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IoArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Keep only pairs into this language (a many-to-one subset).
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args, Debug)]
struct PivotAlignArgs {
    #[arg(long)]
    en_x: PathBuf,
    #[arg(long)]
    en_y: PathBuf,
    #[arg(long)]
    x: String,
    #[arg(long)]
    y: String,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    temperature: f64,
    /// Number of draws; defaults to the input size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, env = "MNMT_SEED", default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Tagged training corpus.
    #[arg(long, required_unless_present = "langs", conflicts_with = "langs")]
    train: Option<PathBuf>,
    /// Tagged dev corpus used for checkpoint selection.
    #[arg(long, required_unless_present = "langs", conflicts_with = "langs")]
    dev: Option<PathBuf>,
    /// Generate a synthetic multi-way corpus with this many languages instead of reading files.
    #[arg(long)]
    langs: Option<usize>,
    /// Pivot-aligned sentences per language for --langs.
    #[arg(long, default_value_t = 300)]
    size: usize,
    /// Sampling temperature for the --langs pretraining mix.
    #[arg(long, default_value_t = 5.0)]
    temperature: f64,
    /// Existing vocabulary; otherwise one is learned from the training data.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Target size for a learned vocabulary; merges run to exhaustion if unset.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// TOML file with optional [model] and [plan] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    plan: PlanFlags,
    /// Also finetune one many-to-one model per target language.
    #[arg(long)]
    two_stage: bool,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    finetune_warmup: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Tagged corpus whose pairs all go into --target.
    #[arg(long)]
    train: PathBuf,
    /// Tagged dev corpus; only pairs into --target are used.
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    target: String,
    /// Train once per learning rate in {1e-4, 1e-5, 1e-6} and keep the lowest dev loss.
    #[arg(long, conflicts_with = "lr")]
    lr_sweep: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SearchFlags {
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Length-normalization exponent.
    #[arg(long, default_value_t = mnmt_core::decode::DEFAULT_ALPHA)]
    alpha: f64,
    /// Generated-token limit; defaults to 2 * source length + 8.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Tagged corpus whose sources are re-translated.
    #[arg(long)]
    input: PathBuf,
    /// Distilled corpus.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    search: SearchFlags,
    /// Train a student of this model preset on the distilled corpus.
    #[arg(long, requires_all = ["dev", "out"])]
    student: Option<String>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanFlags,
    /// Student output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Model producing the final language.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Tagged corpus.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    search: SearchFlags,
    /// Pivot mode: this model first translates into --pivot-lang.
    #[arg(long, requires = "pivot_lang")]
    via: Option<PathBuf>,
    #[arg(long)]
    pivot_lang: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SmoothingArg {
    None,
    Floor,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// TSV written by `decode`.
    #[arg(long)]
    hypotheses: PathBuf,
    /// Corpus TSV with the references, row-aligned with the hypotheses.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 4)]
    max_n: usize,
    #[arg(long, value_enum, default_value = "none")]
    smoothing: SmoothingArg,
    /// JSON report.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Model presets to time, e.g. E6D6,E9D3.
    #[arg(long, value_delimiter = ',', required = true)]
    configs: Vec<String>,
    /// Trained checkpoints, one per config; untrained weights are used otherwise.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Tagged corpus; its first --sentences pairs are timed and scored.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 30)]
    sentences: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[command(flatten)]
    search: SearchFlags,
    #[arg(long, env = "MNMT_SEED", default_value_t = 1)]
    seed: u64,
    /// Trade-off CSV: config,median_ms,bleu.
    #[arg(long)]
    output: PathBuf,
    /// Optional full latency TSV.
    #[arg(long)]
    latency: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Data(d) => match d {
            DataCommand::GenSynthetic(a) => commands::gen_synthetic(a),
            DataCommand::Filter(a) => commands::filter(a),
            DataCommand::PivotAlign(a) => commands::pivot_align(a),
            DataCommand::Sample(a) => commands::sample(a),
            DataCommand::Tag(a) => commands::tag(a),
            DataCommand::Stats(a) => commands::stats(a),
        },
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Distill(a) => commands::distill(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    }
}
