//! Scenario configuration, presets and the commands behind the `fxdist` binary.
pub mod commands;
pub mod config;
pub mod error;

pub use error::CliError;
