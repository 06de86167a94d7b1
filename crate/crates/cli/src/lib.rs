//! Library side of the `kvprobe` command: run configuration, manifests,
//! the pipeline stages and the command implementations.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use manifest::{load_config, Manifest};
