//! Decoder-only transformer with pluggable KV-cache eviction and trainable
//! soft-token probes that score prompt positions for eviction.
//!
//! - [`math`]: numeric kernels
//! - [`model`]: the transformer, its KV cache, checkpoints and the training tape
//! - [`eviction`]: scoring policies, budget schedules, top-k plans, cache compaction
//! - [`trainer`]: attention-map alignment training of the soft-token bank
//! - [`harness`]: synthetic tasks, base-model pre-training and experiment drivers

#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod error;
pub mod eviction;
pub mod harness;
pub mod math;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
