//! Multigrid back-projection super-resolution.
//!
//! This crate implements a complete desk-scale training and inference stack
//! for extreme single-image upscaling:
//!
//! - a small autodiff tensor engine ([`tensor`]) with 2-d convolutions,
//! - a differentiable bicubic resampler ([`resample`]),
//! - a recursion unfolder that names every convolution instance ([`plan`]),
//! - the generator network and its linear probes ([`generator`]),
//! - a multi-scale discriminator ([`discriminator`]),
//! - fidelity and perceptual loss suites ([`loss`]),
//! - windowed overlapping-patch inference for large images ([`tile`]),
//! - dataset preparation and patch sampling ([`data`]),
//! - the training loops and optimizer ([`train`]),
//! - a binary weight container ([`format`]) and a command-line front end
//!   ([`cli`]).

pub mod cli;
pub mod data;
pub mod discriminator;
pub mod format;
pub mod imageio;
pub mod error;
pub mod generator;
pub mod loss;
pub mod plan;
pub mod resample;
pub mod tensor;
pub mod tile;
pub mod train;

pub use error::{Error, Result};
