//! Desk-scale image difference captioning.
//!
//! A pair of images passes through a weight-shared patch encoder that
//! exposes hidden states at equal-interval tap layers; a stack of
//! alternating self/cross attention blocks refines a small set of
//! learnable delta tokens against both images' taps; a two-layer
//! projector lifts visual features into a tiny causal language model
//! that emits the difference caption. Training runs in two stages with
//! per-group learning rates and a freeze schedule, fed by a procedural
//! toy difference task and a coupled-sample merger for the alignment
//! stage. A pair-mining filter and caption metrics round out the
//! pipeline.

pub mod error;
pub mod rng;
pub mod tensor;

pub mod blocks;
pub use error::{Error, Result};
