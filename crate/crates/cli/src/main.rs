mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "featebm", version, about = "Feature-space OOD detection with an energy-corrected Gaussian mixture")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Fit the tied-covariance class-conditional mixture.
    FitMog(FitMogArgs),
    /// Train the correction network (or a plain EBM with --ebm).
    Train(TrainArgs),
    /// Score features or logits with one detector.
    Score(ScoreArgs),
    /// AUROC / FPR95 report from score files.
    Eval(EvalArgs),
    /// Generate a 2D toy dataset.
    Toy(ToyArgs),
    /// Evaluate a model's energy on a 2D grid.
    Grid(GridArgs),
}

#[derive(Args, Debug)]
pub struct FitMogArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ridge added to the covariance diagonal (default 1e-6 · trace/D).
    #[arg(long)]
    pub shrinkage: Option<f64>,
    #[arg(long, default_value_t = featebm::mog::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// L2-normalize every feature row first.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Mixture archive from fit-mog.
    #[arg(long, required_unless_present = "ebm", conflicts_with = "ebm")]
    pub mog: Option<PathBuf>,
    /// Train a plain EBM without the mixture.
    #[arg(long)]
    pub ebm: bool,
    /// L2-normalize features (plain EBM only; the mixture archive decides otherwise).
    #[arg(long, requires = "ebm")]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// `key = value` file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON-lines training log (default: <out>.log.jsonl).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// `toy` or `full`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub input_noise: Option<f64>,
    #[arg(long)]
    pub sgld_steps: Option<usize>,
    #[arg(long)]
    pub sgld_step_start: Option<f64>,
    #[arg(long)]
    pub sgld_step_end: Option<f64>,
    #[arg(long)]
    pub sgld_noise_start: Option<f64>,
    #[arg(long)]
    pub sgld_noise_end: Option<f64>,
    #[arg(long)]
    pub sgld_clip: Option<f64>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    /// `silu` or `tanh`.
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub net_temperature: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// correction, ebm, gaussian, mahalanobis, knn, msp, odin, energy_logits.
    #[arg(long)]
    pub detector: String,
    /// Model or mixture archive (feature detectors other than knn).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, conflicts_with = "logits")]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Reference features for knn.
    #[arg(long)]
    pub train_features: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Softmax / energy temperature (default 1000 for odin, 1 for energy_logits).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// L2-normalize features for knn.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// In-distribution score file.
    #[arg(long)]
    pub id: PathBuf,
    /// OOD score file as NAME:GROUP:PATH (or NAME:PATH); repeatable.
    #[arg(long, required = true)]
    pub ood: Vec<String>,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional one-row CSV table in percent.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub tpr: f64,
    /// Row label (default: detector named in the ID sidecar).
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    /// `cross` or `grid_crosses`.
    #[arg(long, default_value = "cross")]
    pub kind: String,
    #[arg(long, default_value_t = 500)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 2.0)]
    pub arm_length: f64,
    #[arg(long, default_value_t = 0.05)]
    pub arm_thickness: f64,
    #[arg(long, default_value_t = 6.0)]
    pub grid_pitch: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write this many points on a ring at twice the toy extent.
    #[arg(long)]
    pub ring: Option<usize>,
    /// Writes features.fts, labels.fts (and ring.fts).
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Writes <out>.csv and <out>.fts.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    pub hi: f64,
    #[arg(long, default_value_t = 101)]
    pub resolution: usize,
    /// `total`, `gaussian` or `net`.
    #[arg(long, default_value = "total")]
    pub component: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// 1 for numerical failures inside the pipeline, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let computational = err
        .chain()
        .filter_map(|e| e.downcast_ref::<featebm::Error>())
        .any(featebm::Error::is_computational);
    if computational {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match &cli.command {
        Command::FitMog(a) => commands::fit_mog(a),
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
        Command::Toy(a) => commands::toy(a),
        Command::Grid(a) => commands::grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
