//! The `trio` command line and HTTP service over `trio-core`.

pub mod annotate;
pub mod commands;
pub mod config;
pub mod error;
pub mod registry;
pub mod report;
pub mod service;

pub use commands::{run, Cli, Output};
pub use error::{CliError, ErrorReport};
