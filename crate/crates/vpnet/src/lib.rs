//! IO, file formats, training orchestration and the command-line surface for
//! the stereo-LiDAR fusion network in `vpnet-core`.

#![forbid(unsafe_code)]

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod evalrun;
pub mod formats;
pub mod quantize;
pub mod train;
