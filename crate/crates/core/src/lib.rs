//! Sparse progressive distillation on a small from-scratch transformer encoder.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graft;
pub mod kd;
pub mod log;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod preset;
pub mod prune;
pub mod report;
pub mod rng;
pub mod subsum;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
