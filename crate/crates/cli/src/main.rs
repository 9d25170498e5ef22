use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod run;

#[derive(Debug, Parser)]
#[command(name = "lenctl", version, about = "Length-controlled transcription and compression experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (train/adapt/dev/test splits).
    Synth(SynthArgs),
    /// Learn a BPE merge table from corpus texts.
    LearnBpe(BpeArgs),
    /// Base training on verbatim transcripts.
    Train(TrainArgs),
    /// Continue training a checkpoint on compressed targets.
    Adapt(TrainArgs),
    /// Decode a corpus under a length budget.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Key-value spec file; defaults apply when omitted.
    #[arg(long, env = "LENCTL_SPEC")]
    spec: Option<PathBuf>,
    /// Output directory for `<split>.jsonl` files.
    #[arg(long, env = "LENCTL_OUT")]
    out: PathBuf,
    #[arg(long, env = "LENCTL_SEED", default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BpeArgs {
    /// Corpus files; verbatim and compressed texts are both used.
    #[arg(long = "corpus", required = true, num_args = 1..)]
    corpora: Vec<PathBuf>,
    #[arg(long, env = "LENCTL_MERGES", default_value_t = 500)]
    merges: usize,
    /// Language tags to reserve as `<lang:TAG>` tokens.
    #[arg(long = "tag")]
    tags: Vec<String>,
    #[arg(long, env = "LENCTL_OUT")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Target {
    Verbatim,
    Compressed,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Key-value file with schedule and model settings.
    #[arg(long, env = "LENCTL_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "LENCTL_CORPUS")]
    corpus: PathBuf,
    /// Held-out corpus for token accuracy.
    #[arg(long, env = "LENCTL_DEV")]
    dev: Option<PathBuf>,
    #[arg(long, env = "LENCTL_TOKENIZER")]
    tokenizer: PathBuf,
    /// Starting checkpoint (required for adapt).
    #[arg(long, env = "LENCTL_INIT")]
    init: Option<PathBuf>,
    /// Checkpoint written atomically; also the resume source.
    #[arg(long, env = "LENCTL_OUT")]
    out: PathBuf,
    /// Continue from the state stored at `--out`, if any.
    #[arg(long)]
    resume: bool,
    #[arg(long, env = "LENCTL_CHECKPOINT_EVERY", default_value_t = 0)]
    checkpoint_every: usize,
    /// Training log (line-delimited); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Target text; defaults to verbatim for train, compressed for adapt.
    #[arg(long, value_enum)]
    target: Option<Target>,
    /// Stop after this many steps as if interrupted.
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long, env = "LENCTL_MAX_STEPS")]
    max_steps: Option<usize>,
    #[arg(long = "lr", env = "LENCTL_LR")]
    base_lr: Option<f64>,
    #[arg(long, env = "LENCTL_ADAPT_LR_FACTOR")]
    adapt_lr_factor: Option<f64>,
    #[arg(long, env = "LENCTL_WARMUP_STEPS")]
    warmup_steps: Option<usize>,
    #[arg(long, env = "LENCTL_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "LENCTL_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "LENCTL_LABEL_SMOOTHING")]
    label_smoothing: Option<f64>,
    #[arg(long, env = "LENCTL_EVAL_EVERY")]
    eval_every: Option<usize>,
    /// none | learned | sinusoidal
    #[arg(long, env = "LENCTL_CONDITIONING")]
    conditioning: Option<String>,
    #[arg(long, env = "LENCTL_MODEL_DIM")]
    model_dim: Option<usize>,
    #[arg(long, env = "LENCTL_NUM_HEADS")]
    num_heads: Option<usize>,
    #[arg(long, env = "LENCTL_ENCODER_LAYERS")]
    encoder_layers: Option<usize>,
    #[arg(long, env = "LENCTL_DECODER_LAYERS")]
    decoder_layers: Option<usize>,
    #[arg(long, env = "LENCTL_FFN_DIM")]
    ffn_dim: Option<usize>,
    #[arg(long = "dropout", env = "LENCTL_DROPOUT")]
    dropout_rate: Option<f64>,
    #[arg(long, env = "LENCTL_MAX_TRAINED_LENGTH")]
    max_trained_length: Option<usize>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long, env = "LENCTL_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "LENCTL_TOKENIZER")]
    tokenizer: PathBuf,
    #[arg(long, env = "LENCTL_CORPUS")]
    corpus: PathBuf,
    #[arg(long, env = "LENCTL_OUT")]
    out: PathBuf,
    /// ref | min-baseline | fixed:N
    #[arg(long, env = "LENCTL_BUDGET", default_value = "ref")]
    budget: String,
    /// Baseline hypothesis file for `--budget min-baseline`.
    #[arg(long, env = "LENCTL_BASELINE")]
    baseline: Option<PathBuf>,
    /// Stop once the budget is used up.
    #[arg(long, env = "LENCTL_FORCED_STOP")]
    forced_stop: bool,
    #[arg(long, env = "LENCTL_BEAM", default_value_t = 1)]
    beam: usize,
    #[arg(long, env = "LENCTL_MAX_LEN", default_value_t = 200)]
    max_len: usize,
    /// Reference text for budgets; defaults to compressed when present.
    #[arg(long, value_enum)]
    target: Option<Target>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Desired {
    /// Reference token count.
    Ref,
    /// Budget recorded with each hypothesis.
    Budget,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, env = "LENCTL_REFS")]
    refs: PathBuf,
    #[arg(long, env = "LENCTL_HYPS")]
    hyps: PathBuf,
    #[arg(long, env = "LENCTL_TOKENIZER")]
    tokenizer: PathBuf,
    #[arg(long, value_enum, default_value = "ref")]
    desired: Desired,
    #[arg(long, value_enum)]
    target: Option<Target>,
    /// Directory for report.txt, report.json, utterances.jsonl, histogram.tsv.
    #[arg(long, env = "LENCTL_OUT")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => run::synth(a),
        Cmd::LearnBpe(a) => run::learn_bpe(a),
        Cmd::Train(a) => run::train(a, false),
        Cmd::Adapt(a) => run::train(a, true),
        Cmd::Decode(a) => run::decode(a),
        Cmd::Eval(a) => run::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
