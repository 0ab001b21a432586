//! Spatial-temporal token modeling laboratory.
//!
//! Synthetic videos are encoded frame by frame into visual tokens, laid out
//! frame-major ahead of the text prompt, and fed to a small causal transformer
//! with rotary positions. Training can drop a random fraction of the visual
//! tokens and add a masked video modeling loss that pulls the surviving
//! tokens' final hidden states toward those of a gradient-free unmasked pass.
//! Long videos can be summarised by a global-local input that adds a
//! zero-initialised projection of mean-pooled frames to a sparse subset of
//! frames.

pub mod data;
pub mod error;
pub mod globallocal;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod tokens;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
