//! `canids`: simulate, ingest, window, train, score, evaluate and benchmark.

mod commands;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use canids::canio::{AddressWidth, FrameFormat};
use canids::detect::Decision;
use canids::windowing::OovPolicy;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "canids", version, about = "CAN intrusion detection with a masked-ID transformer")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the attack-free stream and the three attack streams.
    Simulate(SimulateArgs),
    /// Parse a capture, validate it and write it as dataset CSV.
    Ingest(IngestArgs),
    /// Tokenize a capture and write a window shard.
    BuildWindows(BuildWindowsArgs),
    /// Train a model on attack-free traffic and write a checkpoint.
    Train(TrainArgs),
    /// Write per-window verdicts for one capture.
    Score(ScoreArgs),
    /// Score labeled captures and write detection reports.
    Eval(EvalArgs),
    /// Tabulate detection metrics across checkpoints.
    Sweep(SweepArgs),
    /// Measure per-window inference latency across window sizes.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    #[arg(long, value_parser = parse_format, default_value = "dataset-csv")]
    pub format: FrameFormat,
    /// Skip malformed rows instead of aborting.
    #[arg(long)]
    pub lenient: bool,
    /// CAN id width in bits.
    #[arg(long, default_value_t = 11, value_parser = parse_width)]
    pub address_width: u32,
}

impl InputArgs {
    pub fn width(&self) -> AddressWidth {
        AddressWidth::from_bits(self.address_width).expect("validated by clap")
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scenario JSON; defaults to the built-in suite.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Multiplies every stream length.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, value_parser = parse_format, default_value = "dataset-csv")]
    pub format: FrameFormat,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub input_args: InputArgs,
}

#[derive(Args, Debug)]
pub struct BuildWindowsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Existing vocabulary; built from `--data` when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long = "T")]
    pub window: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Output base path; writes `<out>.bin` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub input_args: InputArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Attack-free capture.
    #[arg(long, required_unless_present = "windows")]
    pub data: Option<PathBuf>,
    /// Window shard base path, used instead of `--data`.
    #[arg(long, requires = "vocab", conflicts_with = "data")]
    pub windows: Option<PathBuf>,
    /// Vocabulary of the shard.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "T", default_value_t = 32)]
    pub window: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.45)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 256)]
    pub d_model: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub valid_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub input_args: InputArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OovArg {
    Unk,
    Flag,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DecisionArg {
    AnyMiss,
    AllMiss,
}

#[derive(Args, Debug, Clone)]
pub struct DetectArgs {
    /// Top-k candidate set size.
    #[arg(long, default_value_t = 5)]
    pub candidates: usize,
    #[arg(long, default_value_t = 0.45)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 1)]
    pub passes: usize,
    #[arg(long, value_enum, default_value = "any-miss")]
    pub decision: DecisionArg,
    #[arg(long, value_enum, default_value = "unk")]
    pub oov_policy: OovArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Window stride over the scored capture.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Expected window size; must match the checkpoint.
    #[arg(long = "T")]
    pub window: Option<usize>,
}

impl DetectArgs {
    pub fn config(&self) -> canids::detect::DetectConfig {
        canids::detect::DetectConfig {
            k: self.candidates,
            mask_ratio: self.mask_ratio,
            passes: self.passes,
            decision: match self.decision {
                DecisionArg::AnyMiss => Decision::AnyMiss,
                DecisionArg::AllMiss => Decision::AllMiss,
            },
            seed: self.seed,
            oov_policy: match self.oov_policy {
                OovArg::Unk => OovPolicy::Unk,
                OovArg::Flag => OovPolicy::Flag,
            },
            batch_size: self.batch_size,
        }
    }
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Capture to score.
    #[arg(long, required_unless_present = "windows")]
    pub data: Option<PathBuf>,
    /// Window shard to score instead of `--data`.
    #[arg(long, conflicts_with = "data")]
    pub windows: Option<PathBuf>,
    /// Per-window CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub detect: DetectArgs,
    #[command(flatten)]
    pub input_args: InputArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled captures (repeatable).
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Output directory for reports.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub detect: DetectArgs,
    #[command(flatten)]
    pub input_args: InputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    /// Vary the window size.
    #[value(name = "T")]
    Window,
    /// Vary mask ratio and head count.
    #[value(name = "mh")]
    MaskHeads,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub detect: DetectArgs,
    #[command(flatten)]
    pub input_args: InputArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Take layer sizes and vocabulary from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of real ids M when no checkpoint is given.
    #[arg(long, default_value_t = 90)]
    pub vocab_size: usize,
    #[arg(long = "T", value_delimiter = ',', default_values_t = vec![16, 32, 64, 128, 256])]
    pub windows: Vec<usize>,
    /// Windows timed per size.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Windows per forward pass; 1 measures single-window latency.
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<FrameFormat, String> {
    s.parse()
}

fn parse_width(s: &str) -> Result<u32, String> {
    match s {
        "11" => Ok(11),
        "29" => Ok(29),
        _ => Err(format!("address width must be 11 or 29, got {s}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CANIDS_LOG", "info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(fail::USAGE);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Ingest(a) => commands::ingest(a),
        Command::BuildWindows(a) => commands::build_windows(a),
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
