//! Multimodal cybersickness prediction from head-mounted display sensors.
//!
//! The crate covers the whole pipeline: session log ingestion, feature
//! preparation (z-scores, dense optical flow, stereo disparity), labeled
//! window extraction, a late-fusion network trained with a from-scratch
//! reverse-mode tape, cross-validated evaluation, the paired statistics used
//! to inspect the data, and a seeded synthetic session generator.

pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod labeling;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
