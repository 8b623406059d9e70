//! `agcn`: feature extraction, synthetic data, training, evaluation,
//! gradient checks and scene-graph overlays.
//!
//! Exit codes: 0 on success, 1 when a run fails (numeric trouble, unreadable
//! inputs, a failed check), 2 for usage and configuration errors.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod data;
pub mod error;
pub mod manifest;

pub use error::{CliError, CliResult};

/// Environment variable overriding `train.seed`.
pub const SEED_ENV: &str = "AGCN_SEED";

#[derive(Parser, Debug)]
#[command(name = "agcn", version, about = "Attentional graph convolutional scene classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Audio,
    Visual,
}

impl From<ModalityArg> for agcn_core::Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Audio => agcn_core::Modality::Audio,
            ModalityArg::Visual => agcn_core::Modality::Visual,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write one AGT1 feature tensor per manifest entry plus index.tsv.
    Extract(ExtractArgs),
    /// Generate a synthetic labelled dataset with manifests and a config.
    Synth(SynthArgs),
    /// Train a model; writes a checkpoint, metrics.csv and confusion.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled test set.
    Eval(EvalArgs),
    /// Compare tape gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Draw the salient and contextual graphs over an input.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub modality: ModalityArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Model config fixing the feature size; defaults to the full preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "visual")]
    pub modality: ModalityArg,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long = "train", default_value_t = 200)]
    pub train_size: usize,
    #[arg(long = "test", default_value_t = 80)]
    pub test_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint directory; also receives metrics.csv and confusion.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("data").required(true).args(["config", "manifest"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config whose `data.*` keys name the test set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labelled manifest to evaluate on.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Also write the confusion matrix here.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("model").required(true).args(["tiny", "config"])))]
pub struct GradcheckArgs {
    /// Backbone widths [4,8,8,16,32], k = 8, two classes, one sample.
    #[arg(long)]
    pub tiny: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    /// A .ppm/.pgm image or .wav clip matching the checkpoint modality.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Nodes per graph; defaults to the checkpoint's k.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub radius: usize,
    /// Also write the node and edge lists as JSON.
    #[arg(long)]
    pub graph_json: Option<PathBuf>,
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Extract(a) => commands::extract(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Visualize(a) => commands::visualize(&a),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("agcn: {e}");
            e.exit_code()
        }
    }
}
