//! Files, dataset directories and the command line for `vcenet-core`.
//!
//! The `vcenet` binary wraps [`cli::run`]; the functions in [`run`] do the work
//! of each command and can be called directly.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod run;

pub use config::Config;
pub use error::{CliError, CliResult};
