//! Pipeline orchestration for hexagon-sequence trajectory prediction:
//! configuration, the six subcommands, and artifact export.

pub mod commands;
pub mod config;
pub mod error;
pub mod export;

pub use config::RunConfig;
pub use error::CliError;
