//! Sparse voxel convolution engine with knowledge distillation for 3D
//! semantic segmentation.
//!
//! The crate trains width-scaled sparse residual U-Nets on voxelized point
//! clouds and compresses a wide teacher into narrow students by matching
//! temperature-softened logits and projected intermediate feature maps.
//! Everything runs on the CPU with reproducible arithmetic: coordinate maps,
//! kernel maps, initialization, batching, and optimizer updates are all
//! deterministic functions of the configured seeds.
//!
//! Module tour:
//!
//! - [`sparse`]: coordinate maps, sparse tensors, and kernel maps (the
//!   gather/scatter plans of sparse convolutions).
//! - [`nn`]: layers with explicit forward/backward passes — sparse
//!   convolutions, batch norm over active sites, residual blocks.
//! - [`models`]: the Res16UNet encoder/decoder family with width divisors,
//!   feature taps, and a finite-difference gradient checker.
//! - [`distill`]: cross-entropy, temperature-softened KL, and feature-map
//!   projection losses plus their combination.
//! - [`data`]: point clouds, voxelization, synthetic scene generation,
//!   augmentation, and PLY I/O.
//! - [`train`]: optimizers, LR schedules, the training loop, evaluation
//!   metrics, checkpoints, and history logs.

pub mod data;
pub mod distill;
pub mod models;
pub mod nn;
pub mod report;
pub mod scalar;
pub mod sparse;
pub mod train;

pub use scalar::{Dtype, Scalar};
