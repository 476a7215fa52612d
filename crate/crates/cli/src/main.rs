//! `metais` command-line experiment runner.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "metais", version, about = "Importance sampling of metastable diffusions with learned controls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Finite-difference reference solution.
    Hjb,
    /// Adapted metadynamics bias.
    Meta,
    /// Fit the control ansatz to the metadynamics control.
    Fit,
    /// Gradient training of the control.
    Train,
    /// Importance-sampling estimate of Ψ.
    Sample,
    /// Method comparison table.
    Compare,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Hjb => "hjb",
            Command::Meta => "meta",
            Command::Fit => "fit",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Unreliable(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Unreliable(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    /// The more severe of two errors, ordered config > numerical > unreliable.
    pub fn worst(a: Option<CliError>, b: CliError) -> CliError {
        let rank = |e: &CliError| match e {
            CliError::Config(_) => 3,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 1,
            CliError::Unreliable(_) => 0,
        };
        match a {
            Some(a) if rank(&a) >= rank(&b) => a,
            _ => b,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Unreliable(m) => write!(f, "unreliable estimate: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<metais::Error> for CliError {
    fn from(e: metais::Error) -> Self {
        use metais::Error as E;
        match e {
            E::Input(_) | E::Dimension { .. } | E::Unsupported(_) | E::Serde(_) => CliError::Config(e.to_string()),
            E::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config_path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::load(config_path)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&cli.out)?;
    let mut manifest = Manifest::new(cli.command.name(), seed);
    manifest.input(config_path)?;
    let base = config_path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    let ctx = commands::Context { cfg: &cfg, seed, out: &cli.out, base: &base };
    let result = match cli.command {
        Command::Hjb => commands::hjb(&ctx, &mut manifest),
        Command::Meta => commands::meta(&ctx, &mut manifest),
        Command::Fit => commands::fit(&ctx, &mut manifest),
        Command::Train => commands::train(&ctx, &mut manifest),
        Command::Sample => commands::sample(&ctx, &mut manifest),
        Command::Compare => commands::compare(&ctx, &mut manifest),
    };
    manifest.status = match &result {
        Ok(()) => "ok".into(),
        Err(e) => e.to_string(),
    };
    manifest.write(&cli.out)?;
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metais: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
