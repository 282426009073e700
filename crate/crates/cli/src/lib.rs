//! Experiment harness for the ewcseq toolkit: configuration loading,
//! checkpoint persistence, and the CLI commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
