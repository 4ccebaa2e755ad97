//! `svgen`: train, sample, evaluate and analyse stochastic video models on
//! Stochastic Moving MNIST.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use svg_core::config::{Mode, Profile};

#[derive(Parser, Debug)]
#[command(name = "svgen", version, about = "Stochastic video generation on Stochastic Moving MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that reads a configuration.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file layered over the built-in defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.beta=0.001` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master random seed [default: the configured seed, 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-for-bit reproducible runs
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output directory, created if absent
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dataset profile; switches the model to the matching preset when the frame size changes [default: the configured profile, small]
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileArg {
    Small,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Small => Profile::Small,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Fp,
    Lp,
    #[value(alias = "det")]
    Deterministic,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fp => Mode::Fp,
            ModeArg::Lp => Mode::Lp,
            ModeArg::Deterministic => Mode::Deterministic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint.svgc, metrics.csv and config.toml
    Train(TrainArgs),
    /// Sample continuations of test sequences; writes PNG sheets and raw sequence files
    Generate(GenerateArgs),
    /// Best-of-N SSIM and PSNR curves on test sequences; writes eval.csv
    Eval(EvalArgs),
    /// Trajectory-distribution and prior-variance diagnostics
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Export or inspect rendered SM-MNIST sequences
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Print the effective configuration as TOML
    DumpConfig {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model variant [default: the configured mode, lp]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Total optimisation steps [default: the configured train.steps, 1000]
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from this checkpoint instead of initialising
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Conditioning frames
    #[arg(long, default_value_t = 5)]
    pub context: usize,
    /// Total frames per sequence, conditioning included; must exceed --context
    #[arg(long, default_value_t = 20)]
    pub horizon: usize,
    /// Samples drawn per test sequence
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
    /// Number of test sequences
    #[arg(long, default_value_t = 1)]
    pub sequences: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Samples per test sequence (best-of-N) [default: eval.samples, 100]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Conditioning frames [default: eval.context, 5]
    #[arg(long)]
    pub context: Option<usize>,
    /// Predicted frames scored after the conditioning frames [default: eval.horizon, 20]
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Test sequences [default: eval.test_sequences, 64]
    #[arg(long)]
    pub sequences: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeKind {
    /// Per-step histograms of digit displacement after a shared start state
    VelocityDist(VelocityArgs),
    /// Learned-prior sigma over synchronized sequences with collision markers
    PriorVariance(PriorVarianceArgs),
}

#[derive(Args, Debug)]
pub struct VelocityArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model checkpoint whose samples are analysed
    #[arg(long, required_unless_present = "ground_truth", conflicts_with = "ground_truth")]
    pub checkpoint: Option<PathBuf>,
    /// Analyse the data generator instead of a model
    #[arg(long)]
    pub ground_truth: bool,
    /// Sampled continuations [default: analysis.velocity_samples, 1000]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Frames per sequence [default: analysis.velocity_len, 20]
    #[arg(long)]
    pub len: Option<usize>,
    /// Conditioning frames for model samples
    #[arg(long, default_value_t = 5)]
    pub context: usize,
}

#[derive(Args, Debug)]
pub struct PriorVarianceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Learned-prior (lp) checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Synchronized probe sequences [default: analysis.probe_sequences, 500]
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Frames per probe sequence [default: analysis.probe_len, 100]
    #[arg(long)]
    pub len: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum DatasetAction {
    /// Render sequences to dataset.smmn plus a preview sheet
    Export(ExportArgs),
    /// Print the header and pixel statistics of an exported file
    Inspect {
        /// File written by `dataset export` or `generate`
        file: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Digit split to draw from
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Number of sequences
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Frames per sequence
    #[arg(long, default_value_t = 20)]
    pub len: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(commands::EXIT_USAGE),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze { kind: AnalyzeKind::VelocityDist(a) } => commands::velocity_dist(&a),
        Command::Analyze { kind: AnalyzeKind::PriorVariance(a) } => commands::prior_variance(&a),
        Command::Dataset { action: DatasetAction::Export(a) } => commands::dataset_export(&a),
        Command::Dataset { action: DatasetAction::Inspect { file } } => commands::dataset_inspect(&file),
        Command::DumpConfig { common } => commands::dump_config(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
