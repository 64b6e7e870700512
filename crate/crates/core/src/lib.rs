//! Numerical core for training boulder-segmentation networks from frozen
//! random convolutional encoders.
//!
//! Everything in this crate is pure computation over owned buffers: no files,
//! no clocks, no threads. Those live in the `celmseg` companion crate, which
//! plugs into the [`exec::ShardRunner`] and [`exec::Clock`] hooks declared here.
//!
//! Module map:
//!
//! * [`tensor`], [`ops`], [`init`]: dense NHWC tensors and the layer primitives.
//! * [`linalg`]: row-major matrices, GEMM, Cholesky and Householder QR.
//! * [`celm`]: hidden-matrix assembly and the closed-form ridge solve.
//! * [`encoder`], [`archsearch`]: the hierarchical pooling encoder family and
//!   the exhaustive design-space sweep.
//! * [`autodiff`], [`train`]: reverse-mode gradients and mini-batch SGD.
//! * [`unet`]: the frozen-encoder segmentation network.
//! * [`metrics`]: CoB error, MIOU, accuracy, summary statistics, histograms.
//! * [`datagen`]: the procedural single- and multi-boulder scene generator.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod archsearch;
pub mod autodiff;
pub mod celm;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod init;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
