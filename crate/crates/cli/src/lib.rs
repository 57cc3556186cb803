//! Library behind the `moe-carve` command-line tool.

pub mod commands;
pub mod config;
