//! Core of a stereo-LiDAR depth estimation network.
//!
//! Everything numeric lives here: a small dense-tensor substrate with
//! hand-written forward/backward operators, pinhole/voxel geometry, the
//! unified metric-depth volume that stereo features and LiDAR points are
//! fused into, an image-guided point-feature layer, the network blocks that
//! turn the aggregated volume into a depth map, and a synthetic stereo scene
//! generator to train against.
//!
//! The crate is `no_std` (alloc only); file formats, the CLI and everything
//! that touches the filesystem live in the companion `vpnet` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod geometry;
pub mod grad;
pub mod gradsuite;
pub mod math;
pub mod network;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod pointnet;
pub mod rng;
pub mod scenes;
pub mod tensor;
pub mod volume;

pub use math::Real;
pub use tensor::{Tensor, TensorError};
