//! Library side of the `dnls-kam` command: configuration, report writers
//! and the subcommands, so they can be driven from tests as well.

pub mod commands;
pub mod config;
pub mod output;

pub use config::RunConfig;
