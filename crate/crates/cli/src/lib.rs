//! Command-line front end for `compost`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 parse error,
//! 4 validation error, 5 convergence failure.

pub mod commands;
pub mod error;
pub mod io;

pub use commands::{run, Cli, Command};
pub use error::{exit, CliError};
