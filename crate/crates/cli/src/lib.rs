//! Command implementations behind the `d2cache` binary: single runs,
//! parameter sweeps, trace analyses and the self-test.

pub mod analyze;
pub mod bench;
pub mod config;
pub mod error;
pub mod run;
pub mod selftest;

pub use config::{PolicyKind, RunConfig, StrategyKind};
pub use error::CliError;
