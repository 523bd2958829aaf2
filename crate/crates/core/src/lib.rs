//! Linked audio/video flow-matching transformers.
//!
//! Two frozen single-modality DiT backbones are run in lockstep and coupled
//! by trainable fusion blocks that attend jointly over both token streams
//! with temporally aligned rotary positions.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flowmatch;
pub mod fusion;
pub mod infer;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
