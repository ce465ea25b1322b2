//! Command implementations behind the `horizon` binary.

pub mod commands;
pub mod config;
pub mod sheet;
