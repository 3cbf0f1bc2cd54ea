//! `latentpath` command-line interface.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "latentpath",
    version,
    about = "Label-efficient tumour detection from autoencoder latents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by every subcommand. Precedence, lowest
/// first: preset, config file, `--set`, dedicated flags.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file (`#` starts a comment).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Base preset: desk or paper.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Base seed; falls back to LATENTPATH_SEED, then the config.
    #[arg(long, env = "LATENTPATH_SEED")]
    pub seed: Option<u64>,
}

/// Trained models a prediction can come from.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Supervised classifier checkpoint.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["encoder", "head", "clusters"])]
    pub supervised: Option<PathBuf>,
    /// Autoencoder checkpoint providing the encoder.
    #[arg(long, value_name = "FILE")]
    pub encoder: Option<PathBuf>,
    /// Classifier head checkpoint (semi-supervised; needs --encoder).
    #[arg(
        long,
        value_name = "FILE",
        requires = "encoder",
        conflicts_with = "clusters"
    )]
    pub head: Option<PathBuf>,
    /// Labelled cluster model (unsupervised; needs --encoder).
    #[arg(long, value_name = "FILE", requires = "encoder")]
    pub clusters: Option<PathBuf>,
    /// Stain the model reads: he or ihc.
    #[arg(long, default_value = "he")]
    pub input: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired-stain dataset and a half-tumour region.
    Synth {
        out_dir: PathBuf,
        /// Patch side length in pixels (power of two).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Patches in the training pool (manifest.csv).
        #[arg(long, default_value_t = 4500)]
        count: usize,
        /// Patches in the test pool; defaults to a third of --count.
        #[arg(long)]
        test_count: Option<usize>,
        /// Side length of the square map region.
        #[arg(long, default_value_t = 256)]
        region_size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain an autoencoder on the unlabelled split.
    TrainAe {
        /// Dataset directory with manifest.csv and test_manifest.csv.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Reconstruction target: same (H&E) or cross (IHC).
        #[arg(long, default_value = "same")]
        target: String,
        /// Checkpoint path; the loss CSV is written next to it.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Epochs (overrides ae_epochs).
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Cluster unlabelled latents and label the clusters by majority vote.
    Cluster {
        /// Autoencoder checkpoint.
        #[arg(long, value_name = "FILE")]
        encoder: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Size of the labelled voting subset.
        #[arg(long)]
        labels_n: usize,
        /// Number of clusters (overrides kmeans_k).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a linear head on frozen encoder latents.
    TrainHead {
        #[arg(long, value_name = "FILE")]
        encoder: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Size of the labelled subset.
        #[arg(long)]
        labels_n: usize,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Epochs (overrides head_epochs).
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train encoder and head end to end from scratch.
    TrainSupervised {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        labels_n: usize,
        /// Input stain: he or ihc.
        #[arg(long, default_value = "he")]
        input: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Epochs (overrides supervised_epochs).
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Tumour-vs-rest F1 of a trained model on a labelled manifest.
    Evaluate {
        /// Labelled manifest; defaults to DATA/test_manifest.csv.
        #[arg(long, value_name = "FILE", required_unless_present = "data")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Render a sliding-window classification map over a region.
    Map {
        /// H&E region (binary PPM).
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Ground-truth class mask (PGM) to score the map against.
        #[arg(long, value_name = "FILE")]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        stride: usize,
        /// Output directory for map.pam and overlay.ppm.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full label-budget grid and write results tables.
    Grid {
        /// Dataset directory; synthetic data is generated when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Worker threads for independent grid cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Suppress per-cell progress lines.
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            out_dir,
            size,
            count,
            test_count,
            region_size,
            common,
        } => run::cmd_synth(&common, &out_dir, size, count, test_count, region_size),
        Command::TrainAe {
            data,
            target,
            out,
            epochs,
            common,
        } => run::cmd_train_ae(&common, &data, &target, &out, epochs),
        Command::Cluster {
            encoder,
            data,
            labels_n,
            k,
            out,
            common,
        } => run::cmd_cluster(&common, &encoder, &data, labels_n, k, &out),
        Command::TrainHead {
            encoder,
            data,
            labels_n,
            out,
            epochs,
            common,
        } => run::cmd_train_head(&common, &encoder, &data, labels_n, &out, epochs),
        Command::TrainSupervised {
            data,
            labels_n,
            input,
            out,
            epochs,
            common,
        } => run::cmd_train_supervised(&common, &data, labels_n, &input, &out, epochs),
        Command::Evaluate {
            manifest,
            data,
            models,
            common,
        } => run::cmd_evaluate(&common, manifest.as_deref(), data.as_deref(), &models),
        Command::Map {
            image,
            mask,
            stride,
            out,
            models,
            common,
        } => run::cmd_map(&common, &image, mask.as_deref(), stride, &out, &models),
        Command::Grid {
            data,
            out,
            jobs,
            quiet,
            common,
        } => run::cmd_grid(&common, data.as_deref(), &out, jobs, quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
