//! Persistence formats and subcommands behind the `hgm` binary.

pub mod blob;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod store;
