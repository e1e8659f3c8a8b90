mod commands;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mmflow_core::config::RunConfig;
use mmflow_core::Error;

/// Environment variable overriding the configured RNG seed.
const SEED_ENV: &str = "MMFLOW_SEED";

#[derive(Parser)]
#[command(name = "mmflow", version, about = "Multimodal conditional flow matching for music")]
struct Cli {
    /// JSON configuration file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed (overrides MMFLOW_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Embedding width shared by all encoders.
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    corpus_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Autoencoder,
    Align,
    Gen,
    Joint,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Autoencoder => store::AUTOENCODER,
            Stage::Align => store::ALIGN,
            Stage::Gen => store::GEN,
            Stage::Joint => store::JOINT,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train and validation corpora.
    SynthData {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
    },
    /// Train one stage and write its checkpoint and loss log.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Epoch count for this stage.
        #[arg(long)]
        epochs: Option<usize>,
        /// Weight of the alignment loss in joint training.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Generate clips from any non-empty subset of conditions.
    Generate {
        /// Image descriptor, or @file.
        #[arg(long)]
        image: Option<String>,
        /// Story text, or @file.
        #[arg(long)]
        story: Option<String>,
        /// Music caption, or @file.
        #[arg(long)]
        caption: Option<String>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Output directory (default: <report-dir>/generated).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated (or ground-truth) clips of a split.
    Evaluate {
        #[arg(long, default_value = "val")]
        split: String,
        /// Score the split's own clips instead of generated ones.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Run the annotation agents over an image manifest and a music pool.
    Annotate {
        /// Image manifest (default: <corpus-dir>/train/manifest.jsonl).
        #[arg(long)]
        images: Option<PathBuf>,
        /// Directory of WAV clips (default: <corpus-dir>/train).
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Quadruple manifest path (default: <report-dir>/quadruples.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        review_threshold: Option<f64>,
        #[arg(long)]
        filter_threshold: Option<f64>,
    },
    /// Train the aligned, raw-feature and oracle-embedding arms and report
    /// their validation metrics.
    Ablate {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.dim {
        cfg.dim = d;
    }
    if let Some(p) = &cli.corpus_dir {
        cfg.paths.corpus = p.clone();
    }
    if let Some(p) = &cli.checkpoint_dir {
        cfg.paths.checkpoints = p.clone();
    }
    if let Some(p) = &cli.report_dir {
        cfg.paths.reports = p.clone();
    }
    if cli.sequential {
        cfg.parallel = false;
    }
    match &cli.command {
        Command::SynthData { n_train, n_val } => {
            cfg.n_train = n_train.unwrap_or(cfg.n_train);
            cfg.n_val = n_val.unwrap_or(cfg.n_val);
        }
        Command::Train { stage, epochs, lambda } => {
            if let Some(e) = *epochs {
                match stage {
                    Stage::Autoencoder => cfg.autoencoder.epochs = e,
                    Stage::Align => cfg.align.epochs = e,
                    Stage::Gen => cfg.generation.epochs = e,
                    Stage::Joint => cfg.joint.epochs = e,
                }
            }
            cfg.lambda = lambda.unwrap_or(cfg.lambda);
        }
        Command::Annotate { review_threshold, filter_threshold, .. } => {
            cfg.agents.review_threshold = review_threshold.unwrap_or(cfg.agents.review_threshold);
            cfg.agents.filter_threshold = filter_threshold.unwrap_or(cfg.agents.filter_threshold);
        }
        Command::Ablate { epochs, eval_every } => {
            cfg.ablation.epochs = epochs.unwrap_or(cfg.ablation.epochs);
            cfg.ablation.eval_every = eval_every.unwrap_or(cfg.ablation.eval_every);
        }
        Command::Generate { .. } | Command::Evaluate { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli).context("resolving configuration")?;
    log::info!("seed {}, config hash {}", cfg.seed, cfg.hash());
    match cli.command {
        Command::SynthData { .. } => commands::synth_data(&cfg),
        Command::Train { stage, .. } => commands::train(&cfg, stage.name()),
        Command::Generate { image, story, caption, n, out } => {
            let args = commands::GenerateArgs {
                image: image.as_deref().map(commands::read_arg).transpose()?,
                story: story.as_deref().map(commands::read_arg).transpose()?,
                caption: caption.as_deref().map(commands::read_arg).transpose()?,
                n,
                out: out.unwrap_or_else(|| cfg.paths.reports.join("generated")),
            };
            commands::generate(&cfg, &args)
        }
        Command::Evaluate { split, ground_truth } => commands::evaluate(&cfg, &split, ground_truth),
        Command::Annotate { images, pool, out, .. } => {
            commands::annotate(&cfg, &commands::AnnotateArgs { images, pool, out })
        }
        Command::Ablate { .. } => commands::ablate(&cfg),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<Error>());
    match core {
        Some(Error::Config(_)) => 2,
        Some(Error::Dependency(_)) => 3,
        Some(Error::Transport { .. }) => 4,
        Some(Error::Numeric(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
