//! Config-driven runner behind the `memmamba` binary.

pub mod commands;
pub mod config;

pub use commands::{run, Action, SweepAxis};
pub use config::RunConfig;
