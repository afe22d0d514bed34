//! Run configuration, checkpoint persistence, and the subcommand
//! implementations behind the `sbridge` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
