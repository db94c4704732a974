use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "batkit",
    version,
    about = "Train, align, grow and evaluate small bidirectional language models"
)]
pub struct Cli {
    /// Run all arithmetic at 64-bit width (verification mode). Same as BATKIT_F64=1.
    #[arg(long, global = true)]
    pub f64: bool,

    /// Where to write the run manifest [default: <output>.manifest.json].
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, exam, instruction set or prompt list.
    GenData(GenData),
    /// Pre-train with the bidirectional next-token objective.
    Pretrain(Pretrain),
    /// Fine-tune on prompt/response pairs with the prompt masked out.
    Instruct(Instruct),
    /// Train a reward model on preference records.
    RewardTrain(RewardTrain),
    /// Optimize a policy against a reward with PPO.
    Ppo(Ppo),
    /// Grow a checkpoint's width while preserving its function.
    Expand(Expand),
    /// Double a checkpoint's depth by repeating its layer stack.
    Stack(Stack),
    /// Train progressively deeper models by repeated stacking.
    ProgStack(ProgStack),
    /// Measure the largest logit difference between two checkpoints.
    Verify(Verify),
    /// Score a checkpoint on a multiple-choice exam.
    Eval(Eval),
    /// Generate a continuation from a checkpoint.
    Sample(Sample),
    /// Run the preference annotation service.
    Serve(Serve),
    /// Label response pairs with a rule-based judge.
    AiFeedback(AiFeedback),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Instruct(_) => "instruct",
            Command::RewardTrain(_) => "reward-train",
            Command::Ppo(_) => "ppo",
            Command::Expand(_) => "expand",
            Command::Stack(_) => "stack",
            Command::ProgStack(_) => "prog-stack",
            Command::Verify(_) => "verify",
            Command::Eval(_) => "eval",
            Command::Sample(_) => "sample",
            Command::Serve(_) => "serve",
            Command::AiFeedback(_) => "ai-feedback",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Constant,
    Copy,
    Reversal,
    Arithmetic,
    Mixture,
    /// Balanced four-way multiple-choice exam (JSON Lines).
    Exam,
    /// Prompt/response pairs whose response reverses the prompt (JSON Lines).
    Instruct,
    /// One random prompt per line.
    Prompts,
    /// Unlabelled response pairs for ai-feedback (JSON Lines).
    Pairs,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    /// Number of documents or items.
    #[arg(long, default_value_t = 1000)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Longest document in tokens (corpora only).
    #[arg(long, default_value_t = 62)]
    pub max_tokens: usize,
    /// Shortest random unit (corpora only).
    #[arg(long, default_value_t = 2)]
    pub min_unit: usize,
    /// Longest random unit; also the longest prompt or response for other kinds.
    #[arg(long, default_value_t = 8)]
    pub max_unit: usize,
    /// Number of exam categories.
    #[arg(long, default_value_t = 4)]
    pub categories: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training hyper-parameters shared by all training commands. Flags override
/// values from `--config`, which override the built-in defaults.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// TOML file of flat `key = value` settings.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set adam_beta2=0.99`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,
    /// Print the loss every N steps (0 = only the last).
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

/// Model shape for freshly initialized models.
#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Seed for parameter initialization [default: the training seed].
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    /// Text file with one document per line, or a directory of documents.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct Instruct {
    /// Pre-trained (or instruction-tuned) checkpoint.
    #[arg(long)]
    pub init: PathBuf,
    /// JSON Lines of `{prompt, response}` or `{turns: [...]}` records.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct RewardTrain {
    /// Backbone checkpoint; a policy gets a fresh zero reward head.
    #[arg(long)]
    pub init: PathBuf,
    /// Preference records (JSON Lines).
    #[arg(long)]
    pub prefs: PathBuf,
    /// Held-out preference records for ranking accuracy.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Drop records flagged as low quality.
    #[arg(long)]
    pub drop_low_quality: bool,
    /// How the label sign enters the loss.
    #[arg(long, value_parser = ["literal", "flipped"])]
    pub preference_sign: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct Ppo {
    /// Instruction-tuned checkpoint: the starting policy and the fixed reference.
    #[arg(long)]
    pub policy: PathBuf,
    /// Reward model checkpoint, or `density:<byte>` for the byte-density oracle.
    #[arg(long)]
    pub reward: String,
    /// One prompt per line.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Corpus for the pre-training term (needed when lambda_pt > 0).
    #[arg(long)]
    pub pretrain: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long)]
    pub lambda_it: Option<f64>,
    #[arg(long)]
    pub lambda_pt: Option<f64>,
    #[arg(long)]
    pub ppo_clip: Option<f64>,
    #[arg(long)]
    pub ppo_inner_steps: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Exact,
    Approx,
}

#[derive(Debug, Args)]
pub struct Expand {
    #[arg(long)]
    pub src: PathBuf,
    /// Multiply d_model, n_heads and d_ff by this factor.
    #[arg(long, conflicts_with_all = ["d_model", "n_heads", "d_ff"])]
    pub width_mult: Option<usize>,
    /// Target d_model (d_head stays fixed, so this must be a multiple of it).
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Exact)]
    pub mode: Mode,
    /// Check function preservation after expanding.
    #[arg(long)]
    pub verify: bool,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    /// Write the index maps as JSON Lines.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Stack {
    #[arg(long)]
    pub src: PathBuf,
    /// Number of doublings.
    #[arg(long, default_value_t = 1)]
    pub times: u32,
    /// Keep at most this many layers.
    #[arg(long)]
    pub max_layers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProgStack {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Final depth.
    #[arg(long)]
    pub target_layers: usize,
    /// Number of doublings; training starts at target_layers / 2^k layers.
    #[arg(long)]
    pub k: u32,
    /// Steps per stage: one value for all stages or k+1 comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub stage_steps: Vec<usize>,
    /// Per-stage timings and losses as JSON Lines.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct Verify {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest allowed drift [default: 1e-5 at 64-bit, 1e-3 at 32-bit].
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Exam items as JSON Lines.
    #[arg(long)]
    pub exam: PathBuf,
    /// Exemplars per category taken from the front of that category.
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    #[arg(long, value_parser = ["da", "cot"], default_value = "da")]
    pub style: String,
    #[arg(long, value_parser = ["meanll", "sumll", "letter"], default_value = "meanll")]
    pub score: String,
    /// Rationale budget for chain-of-thought prompting.
    #[arg(long, default_value_t = 64)]
    pub cot_tokens: usize,
    /// Also write per-category results as JSON Lines.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dir {
    Forward,
    Backward,
}

#[derive(Debug, Args)]
pub struct Sample {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Frame the prompt as an instruction (`prompt SEP`).
    #[arg(long)]
    pub instruct: bool,
    #[arg(long, value_enum, default_value_t = Dir::Forward)]
    pub direction: Dir,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    /// 0 means greedy.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Serve {
    /// Append-only event log; created if missing.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct AiFeedback {
    /// `length`, `keyword:<word>` or `oracle-model`.
    #[arg(long)]
    pub judge: String,
    /// Reward checkpoint for the oracle-model judge.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Pairs to label: JSON Lines of `{prompt, response_a, response_b}`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Timestamp stamped on every record (RFC 3339) [default: now].
    #[arg(long)]
    pub created_at: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}
