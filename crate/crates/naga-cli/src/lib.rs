//! Library side of the `naga` binary: config parsing, result tables,
//! and the subcommand implementations. Kept as a lib so integration
//! tests can drive the same code paths the binary uses.

pub mod commands;
pub mod config;
pub mod report;
