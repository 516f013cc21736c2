//! Core library for desk-scale video object segmentation.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! the differentiable kernels and their gradient-check harness, the
//! spatial-semantic backbone, the discriminative query transformer, the
//! dual-level (pixel + object) memory, the multi-object training and
//! inference pipeline, the synthetic moving-shapes generator and the
//! J/F evaluation metrics. File formats, directory layouts and the CLI
//! live in the `s3vos` companion crate.
//!
//! The crate is `no_std` (with `alloc`); float transcendentals come from
//! `libm` so results are bit-reproducible across runs on the same target.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mask;
pub mod memory;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod query;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
