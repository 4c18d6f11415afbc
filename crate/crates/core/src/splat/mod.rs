//! Gaussian-to-voxel splatting.
//!
//! Occupancy at a voxel centre `x` is the probabilistic superposition
//! `α(x) = 1 - Π_i (1 - a_i g_i(x))` over the Gaussians whose cull box
//! contains the voxel. Semantics are the opacity-density weighted mixture of
//! per-Gaussian class distributions,
//! `p(x) = Σ_i w_i softmax(c_i) / (Σ_i w_i + eps)` with `w_i = a_i g_i(x)`.

mod cull;
mod io;
mod kernel;
mod op;

pub use cull::{cull, CullList, IndexBox};
pub use io::{read_grid, write_grid, GridFile, GridPayload};
pub use kernel::{
    field_at, label_voxels, splat_backward, splat_dense, splat_forward, splat_occupancy, splat_semantics, GaussianArrays,
    SplatGrads, SplatOutput, DENSE_MAX_MAHALANOBIS_SQ,
};
pub use op::{splat_on_tape, SplatVars};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp on `a_i g_i` inside the log-space product.
pub const MAX_CONTRIBUTION: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplatConfig {
    /// Mahalanobis radius of the cull box.
    pub cutoff_sigma: f64,
    /// Occupancy threshold `τ` separating empty from occupied voxels.
    pub occupancy_threshold: f64,
    /// Guards the semantic normalisation.
    pub eps: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            cutoff_sigma: 4.0,
            occupancy_threshold: 0.5,
            eps: 1e-8,
        }
    }
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_sigma > 0.0) {
            return Err(Error::Config(format!("cutoff_sigma must be > 0, got {}", self.cutoff_sigma)));
        }
        if !(self.occupancy_threshold > 0.0 && self.occupancy_threshold < 1.0) {
            return Err(Error::Config(format!(
                "occupancy_threshold must lie in (0, 1), got {}",
                self.occupancy_threshold
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
