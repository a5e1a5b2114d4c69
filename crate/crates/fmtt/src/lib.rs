//! Configuration, experiment commands, verification suites and file output
//! around `fmtt_core`.

pub mod commands;
pub mod config;
pub mod exec;
pub mod problems;
pub mod verify;
