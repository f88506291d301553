//! Command-line front end for continual Barlow Twins experiments.

pub mod commands;
pub mod config;
pub mod rundir;

use cbt_core::Error;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Truncated { .. } | Error::Shape(_) | Error::Io(_) => 3,
        Error::NonFinite(_) => 4,
        Error::Checksum { .. } => 5,
    }
}
