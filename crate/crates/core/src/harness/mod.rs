//! Configuration, commands and the invariant suite used by the CLI.

pub mod commands;
pub mod config;
pub mod suite;

pub use commands::{check, compare, live, simulate, sweep, CmdError, SCHEMA};
pub use config::{ConfigError, Overrides, RunConfig, SEED_ENV};
pub use suite::{run_suite, SuiteOptions, SuiteReport};
