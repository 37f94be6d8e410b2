//! Batch pipeline around `velopref-core`: world generation, expert
//! demonstrations, training, rollouts, evaluation, attribution and trip
//! statistics, all driven by one JSON config and one seed.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser};

pub use commands::{run_pipeline, run_stage, PairRecord, Stage};
pub use config::RunConfig;
pub use error::{CliError, ErrorKind, Result};
pub use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "velopref", version, about = "Route-choice preference learning from trajectories")]
pub struct Cli {
    #[arg(value_enum)]
    pub stage: Stage,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Global seed; overrides the config's.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonArgs {
    pub fn load_config(&self) -> Result<RunConfig> {
        let mut sets = self.overrides.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        let cfg = RunConfig::load(&self.config, &sets)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the stage on a pool of the requested size and returns the manifest
/// with the path it was written to.
pub fn execute(cli: &Cli) -> Result<(Manifest, PathBuf)> {
    let cfg = cli.common.load_config()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let m = pool.install(|| run_stage(cli.stage, &cfg))?;
    let path = Manifest::path(&cfg.out_dir, &m.stage);
    Ok((m, path))
}
