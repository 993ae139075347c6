use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mianet::commands;
use mianet::config::{MetricChoice, Profile, RunConfig};
use mianet::Result;

#[derive(Parser)]
#[command(
    name = "mianet",
    version,
    about = "Few-shot segmentation workbench: synthetic episodes, similarity priors, training, seeded evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to disk
    Synth(RunArgs),
    /// Write the prior maps for one sampled held-out episode
    Prior(RunArgs),
    /// Train on the fold's training classes; writes loss.csv and a checkpoint
    Train(RunArgs),
    /// Evaluate over the seeded protocol; writes report.csv
    Eval(RunArgs),
    /// Convert between .miat, .pgm and .csv files
    Convert { input: PathBuf, output: PathBuf },
}

#[derive(Copy, Clone, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for MetricChoice {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => MetricChoice::Euclidean,
            MetricArg::Cosine => MetricChoice::Cosine,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; explicit flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named hyperparameter profile to start from
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Cross-validation fold whose classes are held out
    #[arg(long)]
    fold: Option<usize>,
    /// Support shots per episode (K)
    #[arg(long)]
    shots: Option<usize>,
    /// Comma-separated evaluation seeds
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Triplet margin
    #[arg(long)]
    margin: Option<f64>,
    /// Training epochs (passes over the episode pool)
    #[arg(long)]
    epochs: Option<usize>,
    /// Query pairs per evaluation seed
    #[arg(long)]
    pairs: Option<usize>,
    /// Drop the similarity prior (zero maps instead)
    #[arg(long)]
    no_hpm: bool,
    /// Drop the general-prototype generator and the triplet branch
    #[arg(long)]
    no_gim: bool,
    /// Keep only the finest scale
    #[arg(long)]
    one_scale: bool,
    /// Plain average pooling between prior scales
    #[arg(long)]
    no_info_channels: bool,
    /// Drop the triplet loss but keep the generator
    #[arg(long)]
    no_triplet: bool,
    /// Generator sees only the visual prototype
    #[arg(long)]
    no_word_embeddings: bool,
    /// Distance used by the triplet loss
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Detach mined region features from the gradient
    #[arg(long)]
    stop_gradient_mined: bool,
    /// Report the mean of per-episode IoUs instead of accumulated counts
    #[arg(long)]
    per_episode_miou: bool,
    /// word2vec-style text file with class-name vectors
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Dataset manifest written by `synth`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let profile = args.profile.map(Profile::from);
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load_layered(path, profile)?,
        None => RunConfig::for_profile(profile.unwrap_or(Profile::Desk)),
    };
    if let Some(v) = args.fold {
        cfg.fold = v;
    }
    if let Some(v) = args.shots {
        cfg.shots = v;
    }
    if let Some(v) = &args.seed_list {
        cfg.seed_list = v.clone();
    }
    if let Some(v) = args.margin {
        cfg.margin = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.pairs {
        cfg.eval_pairs = v;
    }
    if args.no_hpm {
        cfg.hpm = false;
    }
    if args.no_gim {
        cfg.gim = false;
    }
    if args.one_scale {
        cfg.one_scale = true;
    }
    if args.no_info_channels {
        cfg.info_channels = false;
    }
    if args.no_triplet {
        cfg.triplet_loss = false;
    }
    if args.no_word_embeddings {
        cfg.word_embeddings = false;
    }
    if let Some(m) = args.metric {
        cfg.metric = m.into();
    }
    if args.stop_gradient_mined {
        cfg.stop_gradient_mined = true;
    }
    if args.per_episode_miou {
        cfg.per_episode_miou = true;
    }
    if let Some(v) = &args.embeddings {
        cfg.embeddings = Some(v.clone());
    }
    if let Some(v) = &args.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &args.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => commands::run_synth(&resolve(&args)?),
        Command::Prior(args) => commands::run_prior(&resolve(&args)?),
        Command::Train(args) => commands::run_train(&resolve(&args)?),
        Command::Eval(args) => commands::run_eval(&resolve(&args)?),
        Command::Convert { input, output } => commands::run_convert(&input, &output),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
