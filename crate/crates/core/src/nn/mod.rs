//! Minimal neural-network toolkit: layers with explicit caches, parameter
//! bookkeeping, optimizers and a flat parameter file format.

pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod param;
pub mod paramfile;

pub use layers::{
    AdaptiveAvgPool, BatchNorm, Cache, Conv, ConvTranspose, Layer, Linear, Mode, Sequential, Trace,
};
pub use optim::{Adam, AdamConfig, Sgd};
pub use param::{joint_params_mut, Module, Param};
