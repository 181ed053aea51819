//! Command-line front end for the colourisation framework: run
//! configuration, subcommands and report files.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::{NormSchedule, Overrides, RunConfig, SpectralTarget};
pub use error::CliError;
