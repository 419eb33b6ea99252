//! Point-voxel convolution primitives for 3D point-cloud learning.
//!
//! The crate provides, from the bottom up:
//!
//! * [`tensor`] — a minimal dense tensor with deterministic accumulation and
//!   a finite-difference harness ([`gradcheck`]) for every backward pass;
//! * [`cloud`] — the point-cloud data model, unit-cube normalization, text
//!   ingestion and synthetic dataset generators;
//! * [`voxel`] — differentiable average-scatter voxelization and trilinear /
//!   nearest devoxelization, plus the distinguishable-points analyzer;
//! * [`nn`] — dense 3D convolution, batch normalization, leaky ReLU and
//!   shared per-point MLPs, each with an explicit backward;
//! * [`net`] — the fused point/voxel block and the small segmentation
//!   network built from it;
//! * [`train`] — loss, Adam, the training loop, and the part-averaged IoU
//!   metric;
//! * [`bench`] — instrumented gather/scatter counting comparing the KNN and
//!   voxel pipelines, resolution sweeps, and report emission;
//! * [`battery`] — the standard finite-difference verification battery.

pub mod battery;
pub mod bench;
pub mod cloud;
pub mod error;
pub mod gradcheck;
pub mod net;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
