//! `wsiseg`: generate synthetic slides, train, map, evaluate, tune beta and
//! render overlays.

mod commands;
mod config;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "wsiseg",
    version,
    about = "Weakly supervised lesion segmentation on synthetic slides"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print its summary
    GenerateData(RunArgs),
    /// Train a network; writes weights, run log and resolved config
    Train(RunArgs),
    /// Compute probability maps for every slide of a dataset
    Map(RunArgs),
    /// Score maps (or a checkpoint) against slide labels and masks
    Eval(RunArgs),
    /// Tune beta1 so the trivial model's optimum lands on a target theta0
    TuneBeta(TuneArgs),
    /// Render a probability overlay of one slide as SVG
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seeds the command uses
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded interleaved pipeline
    #[arg(long)]
    deterministic: bool,
    /// Dataset directory (overrides `data_dir`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Weight checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of probability maps written by `map`
    #[arg(long)]
    maps: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TuneArgs {
    /// Label-noise rate of malign patches
    #[arg(long)]
    gamma: f64,
    /// Fraction of benign slides
    #[arg(long = "r")]
    r: f64,
    #[arg(long)]
    beta0: f64,
    /// Target optimum of the trivial model
    #[arg(long)]
    theta0: f64,
    /// Also write the table as CSV into this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    slide: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Screen pixels per slide pixel
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData(a) => commands::generate_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Map(a) => commands::map(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::TuneBeta(a) => commands::tune_beta(&a),
        Command::Inspect(a) => commands::inspect(&a),
    }
}

fn single_line(text: &str) -> String {
    let body = text.split("\n\nUsage").next().unwrap_or(text);
    let body = body.trim().trim_start_matches("error:").trim();
    body.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::new("usage", single_line(&e.to_string()));
            eprintln!("{}", err.to_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
