mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Synthetic video data, spatiotemporal attention training, saliency
/// explanations and frame-importance evaluation.
#[derive(Parser, Debug)]
#[command(name = "stan", version)]
pub struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic dataset: manifest plus clip files.
    GenData(GenDataArgs),
    /// Train one model on the manifest's train split.
    Train(TrainArgs),
    /// Explain one clip with a trained model.
    Explain(ExplainArgs),
    /// Evaluate checkpoints on the test split, or run a cross-validated grid.
    Eval(EvalArgs),
    /// Consolidate the reports found under a directory into tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// TOML generator settings; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// stan or cnn
    #[arg(long, default_value = "stan")]
    pub model: String,
    /// global, local or global-local
    #[arg(long, default_value = "global-local")]
    pub view: String,
    /// TOML training settings.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Checkpoint path; the training record goes next to it as `.log.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct ExplainOpts {
    /// SmoothGrad noisy samples.
    #[arg(long, default_value_t = 25)]
    pub n_samples: usize,
    /// SmoothGrad noise level relative to the clip's value range.
    #[arg(long, default_value_t = 0.15)]
    pub sigma: f64,
    /// SmoothGrad noise seed.
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Differentiated scalar for vanilla and SmoothGrad: loss or logit.
    #[arg(long, default_value = "loss")]
    pub target: String,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// vanilla, smoothgrad or gradcam
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub clip: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Explained class; defaults to the model's prediction.
    #[arg(long)]
    pub class: Option<usize>,
    /// Marks frames scoring above this value as important in the sidecar.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub opts: ExplainOpts,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoints, each evaluated on the test split.
    #[arg(long, num_args = 1.., conflicts_with = "grid", required_unless_present = "grid")]
    pub checkpoint: Vec<PathBuf>,
    /// TOML grid description for cross-validated runs.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated explanation methods (checkpoint mode).
    #[arg(long, default_value = "vanilla,smoothgrad,gradcam")]
    pub methods: String,
    #[command(flatten)]
    pub opts: ExplainOpts,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
