//! Library side of the `ovseg` binary: configuration, the run pipeline and
//! the report formats. `main.rs` only parses arguments and maps errors to
//! exit codes.

pub mod config;
pub mod pipeline;

use std::fmt;

pub use config::{ProtocolChoice, RunConfig, SEED_ENV};

/// Bad flags, bad config files, or configurations the core rejects as
/// invalid. Maps to exit code 1; everything else maps to 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Exit code for an error escaping a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use ovseg_core::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<E>() {
        Some(E::ConfigInvalid(_) | E::IndivisibleTaxonomy { .. } | E::NonPositiveTemperature(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}
