pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
