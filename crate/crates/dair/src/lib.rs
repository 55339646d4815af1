//! Files, formats and the command line around `dair-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image_io;
pub mod manifest;
pub mod report;

pub use error::{CliError, Result};
