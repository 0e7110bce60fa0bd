//! `rine`: train, evaluate and inspect intermediate-block synthetic image
//! detectors.
//!
//! Exit status: 0 on success, 1 on error, 2 when the run completed but some
//! dataset failed or some image was skipped.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use settings::Overrides;

#[derive(Parser, Debug)]
#[command(name = "rine", version, about = "Synthetic image detection from intermediate ViT blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a head; writes head.rwt, checkpoint.rwt, history.csv and config.json
    Train(TrainArgs),
    /// Train every point of a hyperparameter grid and rank it on a validation set
    Grid(GridArgs),
    /// Evaluate a head on dataset directories; writes report.csv and report.json
    Eval(EvalArgs),
    /// Evaluate under a perturbation; writes perturb_<kind>.csv and .json
    PerturbEval(PerturbEvalArgs),
    /// Block-importance histogram of a trained head; writes importance.csv
    AnalyzeImportance(ImportanceArgs),
    /// Trainable parameter count of a head configuration
    ParamCount(ParamCountArgs),
    /// Write the projected features of every image as CSV rows
    ExportFeatures(ExportArgs),
    /// Generate the synthetic checkerboard toy corpus
    SynthToy(SynthArgs),
    /// Write a randomly initialized toy-scale backbone
    ToyBackbone(ToyBackboneArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training directory with 0_real/ and 1_fake/
    #[arg(long)]
    data: PathBuf,
    /// Validation directory; when given, ACC/AP are written to validation.json
    #[arg(long)]
    val: Option<PathBuf>,
    /// Backbone weight container
    #[arg(long)]
    backbone: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by the same configuration
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write checkpoint.rwt every this many steps
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[command(flatten)]
    settings: Overrides,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file `{"xi": [...], "q": [...], "d_prime": [...]}`; defaults to
    /// the published 4×3×4 grid
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    settings: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Head weight container
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// Dataset directories, each with 0_real/ and 1_fake/; named by their last path component
    #[arg(long, num_args = 1.., required = true)]
    data_dirs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Overrides,
}

#[derive(Args, Debug)]
struct PerturbEvalArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// blur, crop, compress, noise, combined or all
    #[arg(long)]
    kind: String,
}

#[derive(Args, Debug)]
struct ImportanceArgs {
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ParamCountArgs {
    /// Print the three published configurations instead
    #[arg(long)]
    table: bool,
    /// Backbone blocks
    #[arg(long, default_value_t = 24)]
    n: usize,
    /// Backbone width
    #[arg(long, default_value_t = 1024)]
    d: usize,
    #[command(flatten)]
    settings: Overrides,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for features.csv and config.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = rine::toy::TRAIN_PER_CLASS)]
    n_per_class: usize,
    #[arg(long, default_value_t = rine::toy::SIDE)]
    side: usize,
    /// Checkerboard amplitude of fake images; 0 makes the classes identical
    #[arg(long, default_value_t = rine::toy::AMPLITUDE)]
    amplitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ToyBackboneArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Outcome of a command that ran to completion.
pub enum Status {
    Clean,
    /// Completed with skipped images or failed datasets.
    Incomplete,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("RINE_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().with_context(|| format!("RINE_THREADS=`{raw}` is not a count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")
}

fn run(cli: Cli) -> Result<Status> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => commands::train(
            &a.data,
            a.val.as_deref(),
            &a.backbone,
            &a.out,
            a.resume.as_deref(),
            a.checkpoint_every,
            &a.settings.resolve()?,
        ),
        Command::Grid(a) => commands::grid(&a.data, &a.val, &a.backbone, &a.out, a.grid.as_deref(), &a.settings.resolve()?),
        Command::Eval(a) => commands::eval(&a.head, &a.backbone, &a.data_dirs, &a.out, None, &a.settings.resolve()?),
        Command::PerturbEval(a) => {
            let e = a.eval;
            commands::eval(&e.head, &e.backbone, &e.data_dirs, &e.out, Some(&a.kind), &e.settings.resolve()?)
        }
        Command::AnalyzeImportance(a) => commands::analyze_importance(&a.head, &a.out),
        Command::ParamCount(a) => commands::param_count(a.table, a.n, a.d, &a.settings.resolve()?),
        Command::ExportFeatures(a) => commands::export_features(&a.head, &a.backbone, &a.data, &a.out),
        Command::SynthToy(a) => commands::synth_toy(&a.out, a.n_per_class, a.side, a.amplitude, a.seed),
        Command::ToyBackbone(a) => commands::toy_backbone(&a.out, a.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(Status::Clean) => ExitCode::SUCCESS,
        Ok(Status::Incomplete) => {
            eprintln!("rine: finished, but some images were skipped or some datasets failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("rine: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
