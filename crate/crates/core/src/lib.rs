//! Gaze-token fusion transformer for image classification.
//!
//! Expert gaze recordings become fixation sequences, fixation sequences become
//! tokens, and those tokens are fused with ViT patch tokens by unmasked
//! cross-attention (one-way or two-way). Variable-length gaze sequences are
//! batched without padding.

pub mod bench;
pub mod config;
pub mod error;
pub mod gaze;
pub mod imageio;
pub mod integration;
pub mod model;
pub mod nn;
pub mod ragged;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
