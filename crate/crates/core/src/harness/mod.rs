//! Command line front end: configuration, orchestration and report emission.

pub mod cli;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use cli::{run, Cli, Command};
pub use config::{derive_seed, ControlSpec, OutputFormat, Overrides, RunConfig, SolverSection};
pub use manifest::{OutputSink, RunManifest};
pub use pipeline::{certify, CertifyOutcome, CertifyReport, CertifyVerdict, Settings, StageSeeds};
