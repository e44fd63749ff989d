//! Model serving and the `cxr` command-line tool.
//!
//! [`server::router`] builds the HTTP API around an immutable
//! [`cxr_core::bundle::ModelBundle`]; [`cli::run`] drives every core module
//! from the command line.

pub mod cli;
pub mod fixture;
pub mod server;
