//! Pipeline commands behind the `scenflow` binary: synthesis, two-stage
//! training, generation, evaluation and rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod render;
