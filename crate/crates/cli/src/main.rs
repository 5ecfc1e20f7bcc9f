mod commands;
mod config;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pva_core::Error;

/// Identity-preserving inpainting pipeline on a synthetic face corpus.
///
/// Settings resolve as flag > PVA_SEED (seed only) > --config file > built-in default.
#[derive(Debug, Parser)]
#[command(name = "pva", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; omitted keys take their defaults
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed (overrides PVA_SEED and the config) [default: 0]
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory of this command (dataset dir, checkpoint dir or report dir)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus, masks, statistics and manifest
    DatasetBuild {
        #[command(flatten)]
        common: Common,
    },
    /// Train recognizers A (encoder) and B (evaluation) and the attribute classifier
    RecognizerTrain {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the base inpainting denoiser
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Run both PVA training stages on top of the base checkpoint
    TrainPva {
        #[command(flatten)]
        common: Common,
    },
    /// Finetune the PVA matrices on one identity's references
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Identity id from the manifest, e.g. id0007
        #[arg(long)]
        identity: String,
        /// Also adapt the text cross-attention Q, K, V
        #[arg(long, default_value_t = false)]
        cross_attention: bool,
    },
    /// Inpaint one image
    Inpaint {
        #[command(flatten)]
        common: Common,
        /// RGB image to inpaint
        #[arg(long)]
        image: PathBuf,
        /// Mask PNG, 255 = known, 0 = fill
        #[arg(long)]
        mask: PathBuf,
        /// Edit prompt, e.g. "photo of a person glasses"; selects controlled guidance
        #[arg(long)]
        prompt: Option<String>,
        /// Reference images of the identity (up to 5)
        #[arg(long = "ref", value_name = "PNG")]
        refs: Vec<PathBuf>,
        /// Use the finetuned checkpoint of this identity
        #[arg(long)]
        identity: Option<String>,
        /// Guidance scale [default: sampler.guidance_scale from the config]
        #[arg(long)]
        guidance: Option<f64>,
        /// Sampling steps [default: sampler.steps from the config]
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Per-region metrics on the test split
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Finetune on each identity's references before sampling
        #[arg(long, default_value_t = false)]
        finetune: bool,
        /// Skip writing the inpainted PNGs
        #[arg(long, default_value_t = false)]
        no_images: bool,
    },
    /// Sweep guidance scale, reference count or finetuning
    Ablate {
        #[command(flatten)]
        common: Common,
        /// guidance | ref_count | finetune
        #[arg(long)]
        kind: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Invalid(_) | Error::Gate(_) => 2,
        Error::Io { .. } | Error::Image(_) | Error::Format { .. } => 3,
        Error::MissingArtifact(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
