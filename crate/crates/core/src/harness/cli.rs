use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::commands::{
    cmd_adjoint, cmd_certify, cmd_reproduce, cmd_robust, cmd_selftest, cmd_simulate, reproduce_config, ExampleId,
    Prepared,
};
use super::config::{Overrides, RunConfig};
use super::manifest::RunManifest;
use crate::error::{Error, Result};

/// Verification toolkit for robust singular stochastic control.
///
/// Every flag can also be set through the environment variable shown in its help;
/// flags win over the environment, which wins over the configuration file.
#[derive(Debug, Parser)]
#[command(name = "rsoc", version, about, long_about = None)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML), or a manifest.json from an earlier run.
    #[arg(long, global = true, env = "RSOC_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true, env = "RSOC_SEED", value_name = "INT")]
    pub seed: Option<u64>,
    /// Monte Carlo paths.
    #[arg(long, global = true, env = "RSOC_PATHS", value_name = "INT")]
    pub paths: Option<usize>,
    /// Time steps on [0, T].
    #[arg(long, global = true, env = "RSOC_STEPS", value_name = "INT")]
    pub steps: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "RSOC_THREADS", value_name = "INT")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "RSOC_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the state for every regime and write ensemble statistics (stats.csv).
    Simulate,
    /// Solve the first and second adjoints and run the duality checks (adjoint.csv, adjoint.json).
    Adjoint,
    /// Regime costs, worst case over the measures, and the singularity test (robust.json).
    Robust,
    /// Full certification of the configured control (certify.json, integral.csv, pointwise.csv).
    /// Exit 0 consistent or nonsingular, 1 violated, 3 inconclusive.
    Certify,
    /// Rerun a worked example with pinned settings and compare against golden values.
    Reproduce {
        #[arg(value_enum)]
        example: ExampleId,
    },
    /// Quick end-to-end checks with known answers.
    Selftest,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, paths: self.paths, steps: self.steps, out: self.out.clone() }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(RunManifest::load(path)?.config)
    } else {
        RunConfig::load(path)
    }
}

fn required_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config PATH (or RSOC_CONFIG)".into()))?;
    let mut c = load_config(path)?;
    c.apply(&cli.overrides());
    Ok(c)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Simulate => cmd_simulate(&Prepared::new(required_config(cli)?)?),
        Command::Adjoint => cmd_adjoint(&Prepared::new(required_config(cli)?)?),
        Command::Robust => cmd_robust(&Prepared::new(required_config(cli)?)?),
        Command::Certify => cmd_certify(&Prepared::new(required_config(cli)?)?),
        Command::Reproduce { example } => {
            let mut c = match &cli.config {
                Some(path) => load_config(path)?,
                None => reproduce_config(*example),
            };
            c.apply(&cli.overrides());
            cmd_reproduce(&Prepared::new(c)?, *example)
        }
        Command::Selftest => cmd_selftest(),
    }
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
