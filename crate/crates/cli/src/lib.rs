//! The `forge` command line and HTTP session service.

pub mod commands;
pub mod config;
pub mod service;

pub use forge_core as core;
