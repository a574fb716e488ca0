//! Command-line driver: synthesis, preprocessing, training, evaluation and
//! confound controls over the core and network crates.
//!
//! Every report embeds the effective configuration and content hashes of its
//! inputs. Output locations are left out of the echo so that reruns into
//! different directories produce byte-identical files.

pub mod args;
pub mod commands;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{CliError, CliResult};
