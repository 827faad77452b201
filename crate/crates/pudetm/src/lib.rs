//! Command-line front end, file formats and simulation harness for
//! [`pudetm_core`].
//!
//! - [`io`] reads and writes the CSV layout used by every subcommand.
//! - [`model`] holds the model JSON written by `pudetm fit`.
//! - [`simulate`] draws multivariate normal PU samples and runs seeded
//!   Monte-Carlo experiments in parallel.
//! - [`config`] parses TOML experiment files.
//! - [`cli`] implements the `pudetm` binary.

pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod model;
pub mod simulate;

pub use error::{Error, Result};
pub use pudetm_core as core;
