//! Pipeline commands behind the `hlm` binary.

pub mod config;
pub mod report;
pub mod run;
