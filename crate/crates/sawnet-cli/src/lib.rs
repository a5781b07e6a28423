//! Experiment driver: JSON configs in, CSV curves, metric JSON and
//! checkpoints out. The binary in `main.rs` is a thin argument parser over
//! [`commands`]; everything testable lives here.

pub mod commands;
pub mod config;
pub mod report;

use sawnet_core::Error;

/// Process exit code for an error. The contract: 0 success, 1 invariant or
/// verification failure, 2 configuration error, 3 I/O or corrupt input.
pub fn exit_code(e: &Error) -> i32 {
    if !e.is_usage() {
        return 3;
    }
    match e {
        Error::Config(_) | Error::Data(_) | Error::Json(_) => 2,
        _ => 1,
    }
}
