//! Command-line front end: JSON configs in, datasets, weights, traces and
//! reports out, each carrying the hash of the config that produced it.

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;
pub mod suites;
