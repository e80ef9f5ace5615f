//! `slicelab`: offline pipelines and the annotation server.

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slicelab_core::metrics::Mode;

#[derive(Parser)]
#[command(name = "slicelab", version, about = "Interactive annotation workbench tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic volume with ground-truth labels.
    Synth(SynthArgs),
    /// Train one model and write a checkpoint and loss curve.
    Train(TrainArgs),
    /// Train one model per depth and score each on a held-out slice.
    CapacityStudy(CapacityArgs),
    /// Pairwise kappa and Jaccard between readers, with aggregates.
    Agreement(AgreementArgs),
    /// Per-pixel mode of several readers' label maps.
    Consensus(ConsensusArgs),
    /// Score System Usability Scale questionnaires.
    SusScore(SusArgs),
    /// Serve the annotation API over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Args)]
struct SynthArgs {
    /// Output stem; writes `<out>.vol.json/.raw` and `<out>.lab.json/.raw`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shares of normal, reticular and border pixels.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 0.3, 0.2])]
    fractions: Vec<f64>,
    /// Stripe wavelength of the reticular texture in pixels.
    #[arg(long, default_value_t = 5.0)]
    stripe_period: f64,
}

#[derive(Args)]
struct ModelArgs {
    /// Architecture JSON; the default one-layer model when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Slices to train on; every labeled slice when absent.
    #[arg(long, value_delimiter = ',')]
    train_slices: Vec<usize>,
    #[arg(long, default_value_t = slicelab_core::cae::DEFAULT_LEARNING_RATE)]
    learning_rate: f64,
    #[arg(long, default_value_t = slicelab_core::cae::DEFAULT_MOMENTUM)]
    momentum: f64,
    #[arg(long, value_enum, default_value_t)]
    precision: Precision,
}

#[derive(Args)]
struct TrainArgs {
    /// Volume header (`.vol.json`) or stem.
    #[arg(long)]
    volume: PathBuf,
    /// Label map header (`.lab.json`) or stem.
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Rescale gradients whose global L2 norm exceeds this value.
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch loss as `epoch,loss` CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Label map stem for the trained model's predictions.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Predicted pixels below this confidence stay unlabeled.
    #[arg(long, default_value_t = 0.0, requires = "predictions")]
    threshold: f64,
}

#[derive(Args)]
struct CapacityArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Ground-truth or consensus labels.
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5])]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long)]
    test_slice: usize,
    #[arg(long, default_value_t = slicelab_core::study::STUDY_MAX_GRAD_NORM, conflicts_with = "no_clip")]
    max_grad_norm: f64,
    /// Plain SGD without gradient clipping.
    #[arg(long)]
    no_clip: bool,
    /// CSV table path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AgreementArgs {
    /// Label maps, one per reader, or two of one reader for intra-reader
    /// agreement. Reader ids are the file stems.
    #[arg(required = true, num_args = 2..)]
    readers: Vec<PathBuf>,
    #[arg(long, default_value = "3-class")]
    mode: Mode,
    /// CSV rows path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ConsensusArgs {
    #[arg(required = true, num_args = 2..)]
    readers: Vec<PathBuf>,
    /// Output label map stem.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SusArgs {
    /// CSV with ten answers per row, optionally preceded by a respondent id.
    input: PathBuf,
    /// Print the report as JSON instead of CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Training {
    #[default]
    Background,
    Manual,
}

#[derive(Args)]
struct ServeArgs {
    /// Directory scanned for `*.vol.json` volumes.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Architecture of sessions created without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    training: Training,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::CapacityStudy(a) => commands::capacity_study(a),
        Command::Agreement(a) => commands::agreement(a),
        Command::Consensus(a) => commands::consensus(a),
        Command::SusScore(a) => commands::sus_score(a),
        Command::Serve(a) => commands::serve(a),
    }
}
