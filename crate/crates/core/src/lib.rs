//! Ear recognition toolkit: landmark detection, geometric normalization,
//! handcrafted and learned descriptors, score fusion and evaluation.

pub mod augment;
pub mod container;
pub mod descriptors;
pub mod error;
pub mod evalkit;
pub mod imgcore;
pub mod landmarks;
pub mod manifest;
pub mod matchfuse;
pub mod nn;
pub mod normalizer;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
