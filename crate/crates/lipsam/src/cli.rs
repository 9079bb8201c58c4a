//! Command-line parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ArchChoice, ExperimentConfig, LipschitzChoice, WrapChoice};
use crate::error::{AppError, AppResult};
use crate::experiments::{self, Context, Fault, Outcome};

#[derive(Debug, Parser)]
#[command(name = "lipsam", version, about = "Lipschitz-certified amplitude modifiers: bounds, training and dereverberation")]
pub struct Cli {
    /// JSON experiment configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel trials and sweep points.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Record wall-clock times in CSV output (otherwise 0).
    #[arg(long, global = true)]
    pub timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Jacobian-ascent bound validation over all architectures and scales.
    ValidateBounds(BoundsArgs),
    /// Train a denoiser on the synthetic corpus.
    Train(TrainArgs),
    /// Plug-and-play ADMM dereverberation.
    Dereverb(DereverbArgs),
    /// Final SI-SNR over a logarithmic grid of lambda values.
    SweepLambda(SweepArgs),
    /// Empirical Lipschitz search for a saved modifier.
    Certify(CertifyArgs),
    /// Oracle checks of the numerical core.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub arch: Option<ArchChoice>,
    #[arg(long, value_enum)]
    pub lipschitz: Option<LipschitzChoice>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub channel_width: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub init_gain: Option<f64>,
    /// Weight file; the sidecar is written next to it with a .json extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProblemArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub rir: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// `soft-threshold:<tau>`, `identity`, or a sidecar path.
    #[arg(long)]
    pub denoiser: Option<String>,
    #[arg(long, value_enum)]
    pub wrap: Option<WrapChoice>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DereverbArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// `lo:hi:Nlog`.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub denoiser: Option<String>,
    #[arg(long, value_enum)]
    pub wrap: Option<WrapChoice>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, value_enum)]
    pub inject_fault: Option<Fault>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

macro_rules! merge_problem {
    ($params:expr, $args:expr) => {{
        let a = $args;
        if a.input.is_some() {
            $params.input = a.input;
        }
        if a.rir.is_some() {
            $params.rir = a.rir;
        }
        if a.reference.is_some() {
            $params.reference = a.reference;
        }
        set(&mut $params.denoiser, a.denoiser);
        set(&mut $params.wrap, a.wrap);
        set(&mut $params.iters, a.iters);
    }};
}

/// Parses the configuration, applies flag overrides and runs the command.
pub fn execute(cli: Cli) -> AppResult<Outcome> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(threads) = cli.threads.or(config.threads) {
        if threads == 0 {
            return Err(AppError::usage("--threads must be positive"));
        }
        // A global pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let ctx = Context {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        out_dir: cli.out_dir.or(config.out_dir.clone()).unwrap_or_else(|| PathBuf::from(".")),
        timing: cli.timing,
    };
    match cli.command {
        Command::ValidateBounds(a) => {
            let p = &mut config.validate_bounds;
            set(&mut p.restarts, a.restarts);
            set(&mut p.max_iterations, a.max_iterations);
            set(&mut p.scales, a.scales);
            set(&mut p.csv, a.csv);
            set(&mut p.summary, a.summary);
            experiments::validate_bounds(&ctx, p)
        }
        Command::Train(a) => {
            let p = &mut config.train;
            set(&mut p.arch, a.arch);
            set(&mut p.lipschitz, a.lipschitz);
            set(&mut p.epochs, a.epochs);
            set(&mut p.items, a.items);
            set(&mut p.channel_width, a.channel_width);
            set(&mut p.learning_rate, a.learning_rate);
            set(&mut p.init_gain, a.init_gain);
            set(&mut p.out, a.out);
            set(&mut p.log, a.log);
            experiments::train(&ctx, p)
        }
        Command::Dereverb(a) => {
            let p = &mut config.dereverb;
            merge_problem!(p, a.problem);
            set(&mut p.lambda, a.lambda);
            set(&mut p.out, a.out);
            set(&mut p.trace, a.trace);
            experiments::dereverb(&ctx, p)
        }
        Command::SweepLambda(a) => {
            let p = &mut config.sweep_lambda;
            merge_problem!(p, a.problem);
            set(&mut p.grid, a.grid);
            set(&mut p.out, a.out);
            experiments::sweep_lambda(&ctx, p)
        }
        Command::Certify(a) => {
            let p = &mut config.certify;
            set(&mut p.denoiser, a.denoiser);
            set(&mut p.wrap, a.wrap);
            if a.rows.is_some() {
                p.rows = a.rows;
            }
            if a.cols.is_some() {
                p.cols = a.cols;
            }
            set(&mut p.restarts, a.restarts);
            set(&mut p.max_iterations, a.max_iterations);
            set(&mut p.out, a.out);
            experiments::certify(&ctx, p)
        }
        Command::Selfcheck(a) => experiments::selfcheck(&ctx, a.inject_fault),
    }
}

/// Exit status for an error: usage and input problems are all code 1.
pub fn error_exit_code(_: &AppError) -> u8 {
    1
}
