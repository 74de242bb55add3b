//! Command layer for the pipeline: config resolution, the six subcommands,
//! and process exit-code mapping.

pub mod commands;
pub mod config;

use profashion_core::error::Error;

/// Exit codes: 0 success, 1 config error, 2 numerical failure, 3 I/O error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Dim(_) | Error::Labeling(_) | Error::Coverage(_) => 1,
        Error::Numeric(_) => 2,
        Error::Io(_) => 3,
    }
}
