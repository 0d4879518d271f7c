//! Run configuration, output files and the subcommands of the `fpdiff` binary.

pub mod commands;
pub mod config;
pub mod output;
