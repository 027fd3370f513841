//! Overlapped speech detection as frame-level three-class sequence labeling.
//!
//! The pipeline runs audio through 64-bin log-mel features, one of four encoder
//! architectures, and a per-frame SILENCE / SINGLE / OVERLAP classifier trained
//! with class-weighted cross-entropy.

pub mod annotations;
pub mod audio;
pub mod augment;
pub mod cache;
pub mod config;
pub mod error;
pub mod exec;
pub mod features;
pub mod fixtures;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod train;

pub use error::{OsdError, Result};
pub use exec::Execution;
