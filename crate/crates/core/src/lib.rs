//! Online training of deep surrogate models from an ensemble of concurrently
//! running heat-equation simulations.
//!
//! Simulation clients stream every solver time step to a multi-rank training
//! server. Each rank's aggregator thread deduplicates incoming steps and puts
//! them into a [`buffer::TrainingBuffer`] (FIFO, FIRO or Reservoir) from which
//! its trainer thread draws batches. Trainers average gradients across ranks
//! and apply identical Adam updates, so every rank holds the same model.

pub mod buffer;
pub mod config;
pub mod design;
pub mod nn;
pub mod runtime;
pub mod seed;
pub mod solver;
pub mod types;

pub use config::{BufferPolicy, ConfigError, ExperimentConfig, SamplerKind};
pub use types::{Sample, SimParams};
