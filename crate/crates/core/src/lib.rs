//! LiDAR-camera extrinsic calibration trained by appearance and geometric
//! consistency.
//!
//! A pose network reads a 7-channel pseudo-image (RGB plus LiDAR points
//! rasterized under an initial extrinsic) and predicts a correcting
//! transform in one forward pass. During training two auxiliary networks
//! predict a binary intensity image and a depth image; LiDAR points projected
//! under the predicted and the ground-truth extrinsic sample those images and
//! are scored against per-point labels.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod geometry;
pub mod losses;
pub mod nets;
pub mod overlay;
pub mod pseudo;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
