//! Semantic 3D Gaussian occupancy prediction with multi-sensor fusion.
//!
//! The crate is organised around the prediction pipeline:
//!
//! - [`model`]: Gaussians, voxel grids and their geometry;
//! - [`diff`]: the reverse-mode engine every learned component runs on;
//! - [`splat`]: Gaussian-to-voxel splatting with analytic gradients;
//! - [`encoder`], [`fusion`], [`refine`]: one fusion block and the block loop;
//! - [`losses`] and [`metrics`]: training objectives and IoU/mIoU;
//! - [`scenes`]: synthetic scenes and sensor features;
//! - [`harness`]: fitting, training, evaluation and benchmarking drivers.

mod binio;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod refine;
pub mod scenes;
pub mod splat;

pub use error::{Error, Result};
