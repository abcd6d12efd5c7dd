use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtpslab::model::Variant;
use mtpslab::Error;
use serde::Serialize;

mod anymodel;
mod commands;
mod manifest;

#[derive(Parser)]
#[command(
    name = "mtpslab",
    version,
    about = "Multi-token prediction laboratory for speech-token decoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval corpora from the synthetic grammar
    GenData(GenDataArgs),
    /// Train a model on a corpus
    Train(TrainArgs),
    /// Generate speech tokens for one text prompt
    Generate(GenerateArgs),
    /// Generate for every record of a corpus and score reconstruction
    Eval(EvalArgs),
    /// Max-probability and entropy statistics of head-0 predictions
    Analyze(AnalyzeArgs),
    /// Quality and latency table over checkpoints and speedup ratios
    Bench(BenchArgs),
    /// Attention mask utilities
    Masks {
        #[command(subcommand)]
        command: MasksCommand,
    },
}

#[derive(Subcommand)]
enum MasksCommand {
    /// Print a mask as a 0/1 grid
    Print(MaskPrintArgs),
}

#[derive(Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Inclusive text length range
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [4, 12])]
    pub len_range: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub symbols: usize,
    #[arg(long, default_value_t = 6)]
    pub max_run: usize,
    #[arg(long, default_value_t = 0.2)]
    pub p_ext: f64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Variant,
    /// Tokens predicted per step (MTP variants)
    #[arg(long)]
    pub n: Option<usize>,
    /// Group size (group variants)
    #[arg(long)]
    pub g: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.03)]
    pub warmup_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint interval in steps (0: final checkpoint only)
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub backbone_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub projector_layers: usize,
    /// Probability of the streaming mask per training sample
    #[arg(long, default_value_t = 0.5)]
    pub mask_mix: f64,
    #[arg(long, default_value_t = 15)]
    pub cs: usize,
    #[arg(long, default_value_t = 5)]
    pub ct: usize,
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    pub dtype: DTypeArg,
}

#[derive(Args, Serialize)]
pub struct DecodeArgs {
    /// Tokens accepted per backbone forward (defaults to 1, or g for group models)
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub streaming: bool,
    /// Override the checkpoint's speech chunk size
    #[arg(long)]
    pub cs: Option<usize>,
    /// Override the checkpoint's text chunk size
    #[arg(long)]
    pub ct: Option<usize>,
    #[arg(long, default_value_t = 512)]
    pub max_tokens: usize,
    /// Sample instead of greedy decoding
    #[arg(long)]
    pub sample: bool,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub decode_seed: u64,
}

#[derive(Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text symbols separated by spaces or commas
    #[arg(long)]
    pub text: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluate only the first this many records
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 70000)]
    pub n_tokens: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Speedup ratios for MTP checkpoints (group checkpoints always use g)
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [1, 3, 5])]
    pub m: Vec<usize>,
    /// Prompts taken from the start of the corpus
    #[arg(long, default_value_t = 50)]
    pub limit: usize,
    #[arg(long, default_value_t = 512)]
    pub max_tokens: usize,
    /// Time fixed-length generations of this many tokens instead of stopping at EOS
    #[arg(long)]
    pub fixed_length: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
pub enum MaskModeArg {
    NonStreaming,
    Streaming,
}

#[derive(Args, Serialize)]
pub struct MaskPrintArgs {
    /// Text positions including BOS
    #[arg(long)]
    pub lt: usize,
    /// Speech positions including SOS
    #[arg(long)]
    pub ls: usize,
    #[arg(long, value_enum, default_value_t = MaskModeArg::NonStreaming)]
    pub mode: MaskModeArg,
    #[arg(long, default_value_t = 15)]
    pub cs: usize,
    #[arg(long, default_value_t = 5)]
    pub ct: usize,
    /// Non-streaming mask with text rows reading speech columns too
    #[arg(long)]
    pub literal: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::VariantMismatch { .. } => 2,
        Error::Io { .. }
        | Error::Json(_)
        | Error::BadMagic
        | Error::UnsupportedVersion(_)
        | Error::Truncated(_)
        | Error::ShapeMismatch { .. }
        | Error::DtypeMismatch { .. }
        | Error::Checksum(_)
        | Error::RegistryOrder { .. } => 3,
        Error::NonFiniteLoss { .. } | Error::NonFiniteLogits { .. } | Error::NonFiniteGradient(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Masks {
            command: MasksCommand::Print(a),
        } => commands::masks_print(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
