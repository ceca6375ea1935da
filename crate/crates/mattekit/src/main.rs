//! Command-line front end: dataset synthesis, training, evaluation,
//! ablations, and single-image inference.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use mattekit::ablate::{ablate, format_table, AblationSpec};
use mattekit::evaluate::evaluate_checkpoint;
use mattekit::infer::run_inference;
use mattekit::metrics::MetricReport;
use mattekit::synth::{assemble_dataset, SynthConfig};
use mattekit::train::{train, TrainConfig};
use mattekit::{MatteError, Result};

#[derive(Parser)]
#[command(name = "mattekit", about = "Trimap-free image matting at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory from a config file.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and a loss log under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare model variants from an ablation spec.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matte a single image with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the semantic taps and gate maps as PNGs.
        #[arg(long)]
        export_taps: bool,
    },
}

fn read_config<T: DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MatteError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| MatteError::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { config, out } => {
            let config: SynthConfig = read_config(&config)?;
            let (train, test) = assemble_dataset(&config, &out)?;
            println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
        }
        Cmd::Train { config, out } => {
            let config: TrainConfig = read_config(&config)?;
            let history = train(&config, &out)?;
            if let Some(last) = history.last() {
                println!(
                    "finished {} iterations, final total loss {}",
                    last.iter, last.loss.total
                );
            }
            println!("checkpoint at {}", out.join("final").display());
        }
        Cmd::Eval { checkpoint, data, out } => {
            let (reports, mean) = evaluate_checkpoint(&checkpoint, &data, &out)?;
            println!("{}", MetricReport::csv_header());
            println!("{}", mean.csv_row("mean"));
            println!("scored {} samples, report at {}", reports.len(), out.display());
        }
        Cmd::Ablate { spec, out } => {
            let spec: AblationSpec = read_config(&spec)?;
            let rows = ablate(&spec, &out)?;
            print!("{}", format_table(&rows));
        }
        Cmd::Infer { checkpoint, image, out, export_taps } => {
            run_inference(&checkpoint, &image, &out, export_taps)?;
            println!("matte written to {}", out.display());
        }
    }
    Ok(())
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
