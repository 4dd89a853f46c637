//! Orchestration behind the `dualzsl` command-line tool.

pub mod commands;
pub mod config;
pub mod pipeline;
