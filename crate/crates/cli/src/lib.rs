//! Command-line driver: configuration, subcommands and the `verify` suites.

pub mod builtins;
pub mod commands;
pub mod config;
pub mod verify;
