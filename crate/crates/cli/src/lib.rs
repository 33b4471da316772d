//! The `fdu` command-line tool: `localize`, `select`, `ablate` and `synth`,
//! each driven by one JSON config with flag overrides.
//!
//! Exit codes: 0 success, 2 invalid input (config, dump, or missing upstream
//! outputs), 1 internal error. Outputs of a command are written together or
//! not at all.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use fdu_core::PoolScope;

pub mod commands;
pub mod config;
pub mod output;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "invalid input: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "fdu", version, about = "Localize discriminative layers and select forgery-discriminative units")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer profiles and critical layers: layer_profile.csv, critical_layers.json.
    Localize(Overrides),
    /// Neuron scores, elbow selection and the FDU classifier.
    Select(Overrides),
    /// Masking ablations and the decline sweep on the holdout split.
    Ablate(Overrides),
    /// Planted-signal dump plus oracle.json.
    Synth(Overrides),
}

/// Every flag replaces the matching config field.
#[derive(Debug, clap::Args)]
pub struct Overrides {
    /// Path to the JSON run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Layers to score in `select`, comma separated, 1-based.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Seed of the train/holdout split and probes; for `synth`, the generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mask ratios of the decline sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// global or per-layer.
    #[arg(long)]
    pub pool_scope: Option<PoolScope>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig, synth: bool) {
        if let Some(l) = &self.layers {
            cfg.layers = Some(l.clone());
        }
        if let Some(s) = self.seed {
            match (&mut cfg.synth, synth) {
                (Some(spec), true) => spec.seed = s,
                _ => cfg.probe.seed = s,
            }
        }
        if let Some(r) = &self.ratios {
            cfg.ablation.ratios = r.clone();
        }
        if let Some(g) = self.gamma {
            cfg.localization.gamma = g;
        }
        if let Some(a) = self.alpha {
            cfg.localization.alpha = a;
        }
        if let Some(p) = self.pool_scope {
            cfg.pool_scope = p;
        }
    }
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let (ov, synth) = match &cli.command {
        Command::Localize(o) | Command::Select(o) | Command::Ablate(o) => (o, false),
        Command::Synth(o) => (o, true),
    };
    let mut cfg = RunConfig::load(&ov.config)?;
    ov.apply(&mut cfg, synth);
    cfg.validate()?;
    match &cli.command {
        Command::Localize(_) => commands::localize(&cfg),
        Command::Select(_) => commands::select(&cfg),
        Command::Ablate(_) => commands::ablate(&cfg),
        Command::Synth(_) => commands::synth(&cfg),
    }
}

/// Parses `args` (program name first) and runs the command, returning the files written.
pub fn run<I, T>(args: I) -> Result<Vec<PathBuf>, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Input(e.to_string()))?;
    execute(&cli)
}

/// Entry point of the binary: prints diagnostics and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(written)) => {
            for p in written {
                println!("wrote {}", p.display());
            }
            0
        }
        Ok(Err(e)) => {
            eprintln!("fdu: {e}");
            e.exit_code()
        }
        Err(_) => {
            eprintln!("fdu: internal error: unexpected panic");
            1
        }
    }
}
