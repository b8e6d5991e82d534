//! File formats, configuration and subcommands behind the `seot` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;

pub use commands::{cmd_baseline, cmd_run, cmd_run2, cmd_spectrum, cmd_synth, KArg, Overrides, RunArgs, Spectrum};
pub use error::{CliError, CliResult};
pub use report::Report;
