//! Learnable layers with explicit forward and backward passes: dense 3D
//! volumetric convolution, batch normalization, leaky ReLU, and the shared
//! per-point MLP. No autograd tape — each backward is hand-written and
//! certified by the finite-difference harness.

mod activation;
mod batchnorm;
mod conv3d;
mod linear;
pub mod params_io;

pub use activation::{leaky_relu, leaky_relu_backward, DEFAULT_SLOPE};
pub use batchnorm::{batch_norm, batch_norm_backward, BatchNormState, BnCache, BnMode};
pub use conv3d::{conv3d, conv3d_backward, Conv3dParams};
pub use linear::{
    linear_backward, linear_forward, shared_mlp, shared_mlp_backward, LinearParams,
    SharedMlpCache,
};
