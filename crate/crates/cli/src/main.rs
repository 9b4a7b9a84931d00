//! `befa` — train and inspect a behavior-gated feature-adaptation
//! recommender: synthetic data generation, dataset prep, training,
//! evaluation, adapter comparison, attribution heatmaps, and feature
//! deviation diagnostics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use befa_core::adapters::AdapterKind;
use befa_core::dataio::SplitMode;

use config::{resolve, CommonFlags, RunConfig, Settings};

#[derive(Parser)]
#[command(
    name = "befa",
    version,
    about = "Behavior-gated feature adaptation workbench",
    propagate_version = true
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "path")]
    config: Option<PathBuf>,

    /// Master random seed [default: 0]
    #[arg(long, global = true, value_name = "u64")]
    seed: Option<u64>,

    /// Adapter applied to content features [default: befa]
    #[arg(long, global = true, value_name = "none|befa|lora|prompt")]
    adapter: Option<String>,

    /// Behavioral embedding dimension [default: 64]
    #[arg(long, global = true, value_name = "n")]
    dim: Option<usize>,

    /// Decoupled-space size as a multiple of --dim [default: 4]
    #[arg(long = "da-mult", global = true, value_name = "n")]
    da_mult: Option<f64>,

    /// Adapter dropout probability [default: 0.1]
    #[arg(long, global = true, value_name = "p")]
    dropout: Option<f64>,

    /// k-core filtering threshold for prep [default: 10]
    #[arg(long, global = true, value_name = "n")]
    kcore: Option<usize>,

    /// Record-to-fold assignment [default: per-user]
    #[arg(long = "split-mode", global = true, value_name = "per-user|global")]
    split_mode: Option<String>,

    /// Single-threaded evaluation inside training.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Keep adapter gradients out of the behavioral embedding.
    #[arg(long = "stop-grad-behavior", global = true)]
    stop_grad_behavior: bool,

    /// Attribution: cosine on raw features (dims must already match).
    #[arg(long = "raw-cosine", global = true)]
    raw_cosine: bool,

    /// Output directory.
    #[arg(long, global = true, value_name = "dir")]
    out: Option<PathBuf>,

    /// Learning rate [default: 0.001]
    #[arg(long = "learning-rate", global = true, value_name = "lr")]
    learning_rate: Option<f64>,

    /// L2 coefficient on embeddings [default: 0.0001]
    #[arg(long = "lambda-e", global = true, value_name = "l")]
    lambda_e: Option<f64>,

    /// Training batch size [default: 2048]
    #[arg(long = "batch-size", global = true, value_name = "n")]
    batch_size: Option<usize>,

    /// Epoch cap [default: 1000]
    #[arg(long = "max-epochs", global = true, value_name = "n")]
    max_epochs: Option<usize>,

    /// Early-stopping patience in evaluations [default: 10]
    #[arg(long, global = true, value_name = "n")]
    patience: Option<usize>,

    /// Low-rank adapter rank [default: 4]
    #[arg(long = "lora-rank", global = true, value_name = "r")]
    lora_rank: Option<usize>,

    /// Low-rank adapter scale alpha [default: 4]
    #[arg(long = "lora-alpha", global = true, value_name = "a")]
    lora_alpha: Option<f64>,

    /// Freeze behavioral projections to identity (d == d_a == d_m).
    #[arg(long = "identity-proj", global = true)]
    identity_proj: bool,

    /// Evaluation cutoffs [default: 10,20]
    #[arg(long = "ks", global = true, value_name = "k,k,...", value_delimiter = ',')]
    ks: Option<Vec<usize>>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SynthArgs {
    /// Number of users [default: 240]
    #[arg(long, value_name = "n")]
    users: Option<usize>,
    /// Number of items [default: 320]
    #[arg(long, value_name = "n")]
    items: Option<usize>,
    /// Planted latent dimension [default: 6]
    #[arg(long = "latent-k", value_name = "k")]
    latent_k: Option<usize>,
    /// Content feature dimension [default: 16]
    #[arg(long = "feature-dim", value_name = "d")]
    feature_dim: Option<usize>,
    /// Interactions per user [default: 12]
    #[arg(long = "per-user", value_name = "n")]
    per_user: Option<usize>,
    /// Probability of information drift per item [default: 0.3]
    #[arg(long, value_name = "p")]
    drift: Option<f64>,
    /// Probability of information omission per item [default: 0.3]
    #[arg(long, value_name = "p")]
    omit: Option<f64>,
    /// Fraction of informative coordinates an omission zeroes [default: 0.5]
    #[arg(long = "omit-frac", value_name = "f")]
    omit_frac: Option<f64>,
    /// Gaussian noise scale on nuisance coordinates [default: 0.05]
    #[arg(long, value_name = "s")]
    noise: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ideal features.
    Synth(SynthArgs),
    /// k-core filter an interaction file and split it 8:1:1.
    Prep {
        /// Interaction TSV (`user<TAB>item[<TAB>epoch-seconds]`).
        #[arg(long, value_name = "path")]
        interactions: Option<PathBuf>,
    },
    /// Train a recommender and write a checkpoint.
    Train {
        /// Directory holding train.tsv/valid.tsv/test.tsv (from prep).
        #[arg(long, value_name = "dir")]
        data: Option<PathBuf>,
        /// Feature file, `modality=path` or bare path (modality `visual`).
        #[arg(long = "features", value_name = "spec")]
        features: Vec<String>,
        /// Expected feature dimension (default: read from file header).
        #[arg(long = "feature-dim", value_name = "d")]
        feature_dim: Option<usize>,
    },
    /// Evaluate a checkpoint on the test fold.
    Evaluate {
        #[arg(long, value_name = "path")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "dir")]
        data: Option<PathBuf>,
        #[arg(long = "features", value_name = "spec")]
        features: Vec<String>,
        #[arg(long = "feature-dim", value_name = "d")]
        feature_dim: Option<usize>,
    },
    /// Train every adapter variant on shared synthetic splits and compare.
    Compare {
        #[command(flatten)]
        synth: SynthArgs,
        /// Seeds: `a..b` (inclusive), `a,b,c`, or one value [default: 1..5]
        #[arg(long, value_name = "spec")]
        seeds: Option<String>,
    },
    /// Weight bundle activations by behavioral similarity into a heatmap.
    Attribute {
        /// Bundle directory (meta.json + activations/mask_features/behavioral).
        #[arg(long, value_name = "dir")]
        bundle: PathBuf,
        #[arg(long, value_name = "path")]
        checkpoint: PathBuf,
        /// Modality whose fusion projection bridges feature and behavioral
        /// spaces [default: first modality in the checkpoint]
        #[arg(long, value_name = "name")]
        modality: Option<String>,
        /// Run mask features through the trained adapter before projecting.
        #[arg(long = "apply-adapter")]
        apply_adapter: bool,
        /// Upsample the exported map to H x W (e.g. 224x224).
        #[arg(long = "export-size", value_name = "HxW")]
        export_size: Option<String>,
        /// Output formats [default: pgm,csv]
        #[arg(long, value_name = "pgm|csv", value_delimiter = ',')]
        format: Option<Vec<String>>,
    },
    /// Compare raw and adapted features against planted ideal features.
    Diagnose {
        #[arg(long, value_name = "path")]
        checkpoint: PathBuf,
        /// Split directory the checkpoint was trained on.
        #[arg(long, value_name = "dir")]
        data: Option<PathBuf>,
        /// Raw (observed) feature file.
        #[arg(long, value_name = "path")]
        raw: PathBuf,
        /// Ideal feature file.
        #[arg(long, value_name = "path")]
        ideal: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();

    if let Ok(threads) = std::env::var("BEFA_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| anyhow::anyhow!("BEFA_THREADS must be a positive integer"))?;
        if n == 0 {
            anyhow::bail!("BEFA_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }

    let file_cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let adapter = cli
        .adapter
        .as_deref()
        .map(str::parse::<AdapterKind>)
        .transpose()?;
    let split_mode = cli
        .split_mode
        .as_deref()
        .map(str::parse::<SplitMode>)
        .transpose()?;
    let flags = CommonFlags {
        seed: cli.seed,
        adapter,
        dim: cli.dim,
        da_mult: cli.da_mult,
        dropout: cli.dropout,
        learning_rate: cli.learning_rate,
        lambda_e: cli.lambda_e,
        batch_size: cli.batch_size,
        max_epochs: cli.max_epochs,
        patience: cli.patience,
        lora_rank: cli.lora_rank,
        lora_alpha: cli.lora_alpha,
        eval_ks: cli.ks.clone(),
        kcore: cli.kcore,
        split_mode,
        deterministic: cli.deterministic,
        stop_grad_behavior: cli.stop_grad_behavior,
        identity_proj: cli.identity_proj,
        raw_cosine: cli.raw_cosine,
        out: cli.out.clone(),
    };
    let settings: Settings = resolve(&flags, &file_cfg)?;
    let adapter_explicit = adapter;

    match cli.command {
        Command::Synth(args) => commands::synth(&args, &settings),
        Command::Prep { interactions } => commands::prep(interactions.as_deref(), &settings),
        Command::Train {
            data,
            features,
            feature_dim,
        } => commands::train_cmd(data.as_deref(), &features, feature_dim, &settings),
        Command::Evaluate {
            checkpoint,
            data,
            features,
            feature_dim,
        } => commands::evaluate_cmd(
            &checkpoint,
            data.as_deref(),
            &features,
            feature_dim,
            adapter_explicit,
            &settings,
        ),
        Command::Compare { synth, seeds } => {
            commands::compare(&synth, seeds.as_deref(), &settings)
        }
        Command::Attribute {
            bundle,
            checkpoint,
            modality,
            apply_adapter,
            export_size,
            format,
        } => commands::attribute(
            &bundle,
            &checkpoint,
            modality.as_deref(),
            apply_adapter,
            export_size.as_deref(),
            format.as_deref(),
            &settings,
        ),
        Command::Diagnose {
            checkpoint,
            data,
            raw,
            ideal,
        } => commands::diagnose(&checkpoint, data.as_deref(), &raw, &ideal, &settings),
    }
}
