//! Configuration and subcommands behind the `ctql` binary.

pub mod commands;
pub mod config;
