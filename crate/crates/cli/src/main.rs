mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvk_core::MvkError;

use crate::config::{ConventionArg, ExperimentName, FusionArg, RunConfig};

/// Exit code plus message. 2: bad configuration or input, 3: numerical failure, 4: I/O failure.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<MvkError> for CliError {
    fn from(e: MvkError) -> Self {
        let code = if e.is_numerical() {
            3
        } else if e.is_io() {
            4
        } else {
            2
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(name = "mvk", version, about = "Multi-view diffusion kernels from local covariances")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each one overrides the same key in `--config`.
#[derive(Debug, Args)]
struct GlobalFlags {
    /// JSON file with run settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `mvk_out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    views: Option<usize>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Pseudoinverse threshold relative to the largest covariance eigenvalue.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long, global = true, value_enum)]
    convention: Option<ConventionArg>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

impl GlobalFlags {
    fn as_config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            out: self.out.clone(),
            views: self.views,
            epsilon: self.epsilon,
            gamma: self.gamma,
            fusion: self.fusion,
            convention: self.convention,
            workers: self.workers,
            ..RunConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DatasetKind {
    Brownian,
    Helix,
    Flower,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (views, ground truth and manifest).
    Generate {
        #[arg(value_enum)]
        kind: DatasetKind,
    },
    /// Build the rank-gated multi-view kernel of a dataset from kNN covariances.
    Kernel {
        /// Dataset manifest (`dataset.json`).
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Diffusion-map embedding of a kernel stored as `.mvk1` or CSV.
    Embed {
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long, default_value_t = 2)]
        dims: usize,
        #[arg(long, default_value_t = 1)]
        time: u32,
    },
    /// Score a kernel and/or an embedding against a dataset's ground truth.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        kernel: Option<PathBuf>,
        #[arg(long)]
        embedding: Option<PathBuf>,
        /// Comma-separated radii for the distance error curve.
        #[arg(long, value_delimiter = ',')]
        radii: Vec<f64>,
    },
    /// Run a benchmark end to end.
    Experiment {
        #[arg(value_enum)]
        name: Option<ExperimentName>,
    },
    /// Print the version.
    Version,
}

fn resolve(global: &GlobalFlags) -> Result<RunConfig, CliError> {
    let file = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = file.overlay(global.as_config());
    cfg.validate()?;
    if let Some(workers) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::config(format!("worker pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Version = cli.command {
        println!("mvk {}", env!("CARGO_PKG_VERSION"));
        return Ok(());
    }
    let mut cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Version => unreachable!(),
        Command::Generate { kind } => commands::generate(&cfg, kind),
        Command::Kernel { dataset } => commands::kernel(&cfg, &dataset),
        Command::Embed { kernel, dims, time } => commands::embed(&cfg, &kernel, dims, time),
        Command::Evaluate {
            dataset,
            kernel,
            embedding,
            radii,
        } => commands::evaluate(&cfg, &dataset, kernel.as_deref(), embedding.as_deref(), &radii),
        Command::Experiment { name } => {
            cfg.experiment = name.or(cfg.experiment);
            let name = cfg
                .experiment
                .ok_or_else(|| CliError::config("no experiment named on the command line or in the config"))?;
            commands::experiment(&cfg, name)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
