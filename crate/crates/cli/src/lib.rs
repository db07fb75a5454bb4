//! Command-line pipeline and HTTP scoring service on top of `ehrseq`.

pub mod commands;
pub mod config;
pub mod service;

pub use commands::{run, Cli};
