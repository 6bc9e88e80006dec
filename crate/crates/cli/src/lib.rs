//! Library surface of the command-line frontend: configuration loading and
//! the command implementations, kept callable so integration tests drive
//! them directly.

pub mod commands;
pub mod config;
