//! File formats: trajectory logs, parameter checkpoints, run configuration
//! and SVG frames.

pub mod checkpoint;
pub mod config;
pub mod log;
pub mod render;
