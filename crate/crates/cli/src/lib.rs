//! Configuration, manifests and subcommands of the `limix` experiment
//! driver.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
