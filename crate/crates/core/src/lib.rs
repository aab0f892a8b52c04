//! Coarse-level LoFTR feature matching at desk scale.
//!
//! The crate covers the whole coarse pipeline: a residual convolutional
//! head producing 1/16-resolution features, a linear-attention transformer
//! with interleaved self and cross layers, dual-softmax match probabilities,
//! depth-consistency ground truth between two calibrated views, and
//! knowledge-distillation training with gradient accumulation.
//!
//! Everything runs on a small reverse-mode differentiation engine in
//! [`numerics`], so every gradient can be checked against finite
//! differences.

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod config;
pub mod dataio;
pub mod distillation;
pub mod error;
pub mod geometry;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
