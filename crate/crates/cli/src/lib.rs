//! Operator surface for the restoration pipeline: configuration,
//! checkpoints, file formats and the command implementations behind the
//! `previr` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, Result};
