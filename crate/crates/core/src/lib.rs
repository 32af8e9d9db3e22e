//! Scenario synthesis, conditional latent flow matching, and evaluation for
//! multi-agent traffic.
//!
//! The pipeline runs in three stages: [`synth`] builds nominal and
//! safety-critical corpora, [`cvae`] learns per-actor latents over both, and
//! [`flow`] learns a rectified-flow transport from prior latents toward the
//! safety-critical posterior. [`metrics`] scores the resulting rollouts.

pub mod backbone;
pub mod cvae;
pub mod dynamics;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod scene;
pub mod synth;
