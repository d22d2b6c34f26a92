mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Train and evaluate ViT-LoRA, EfficientNet-style and hybrid classifiers
/// on AD / MCI / CN brain MRI slices.
///
/// Any config key may also be given as a flag, e.g. `--lora.rank 4`.
#[derive(Parser, Debug)]
#[command(name = "evl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic three-class slice set.
    Synth {
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pad, normalize and slice NIfTI volumes into a sample directory.
    Extract {
        /// CSV with columns subject_id,label.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        slices: usize,
        /// Cube edge each volume is zero-padded to; 0 skips padding.
        #[arg(long, default_value_t = 224)]
        pad: usize,
        /// Volumes named `<subject_id>.nii` or `<subject_id>.nii.gz`.
        #[arg(required = true)]
        volumes: Vec<PathBuf>,
    },
    /// Holdout training; writes a new run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Subject-level k-fold cross-validation.
    Kfold {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score a checkpoint on a manifest.
    Evaluate {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the validation split of the training manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory for report.csv and confusion.csv; printed when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable parameter counts by component.
    ParamCount {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated LoRA ranks to tabulate instead of a single breakdown.
        #[arg(long, value_delimiter = ',')]
        ranks: Vec<usize>,
    },
    /// Central-difference check of every trainable gradient.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Images per class in the check batch.
        #[arg(long, default_value_t = 1)]
        per_class: usize,
        /// Deliberately break one backward rule; the check must fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Write feature vectors of every sample as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// cls, tap or bridged.
        #[arg(long, default_value = "cls")]
        layer: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key = value file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// reference or toy dimensions.
    #[arg(long)]
    preset: Option<String>,
    /// Training seed: fresh parameters and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any key: `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

/// Rewrites `--a.b v` and `--a.b=v` into `--set a.b=v`.
fn expand_dotted(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let dotted = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(k) if k.contains('=') => {
                out.push("--set".into());
                out.push(k.to_string());
            }
            Some(k) => {
                let v = it.next().unwrap_or_default();
                out.push("--set".into());
                out.push(format!("{k}={v}"));
            }
            None => out.push(a),
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse_from(expand_dotted(std::env::args()));
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
