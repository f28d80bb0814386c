//! HTTP API, CLI and session store over the dbcopilot engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod payload;
pub mod sessions;
