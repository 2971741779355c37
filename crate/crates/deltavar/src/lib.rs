//! File formats, configs and the command-line front end for `deltavar-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod floats;
pub mod model_file;
pub mod outdir;
pub mod report;
pub mod sigma_file;

pub use cli::cli_main;
pub use error::{CliError, Result};
