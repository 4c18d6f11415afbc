use super::kernel::GaussianArrays;
use super::SplatConfig;
use crate::model::GridSpec;

/// Inclusive-exclusive voxel index range `[lo, hi)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl IndexBox {
    pub fn contains(&self, idx: [usize; 3]) -> bool {
        (0..3).all(|a| idx[a] >= self.lo[a] && idx[a] < self.hi[a])
    }

    pub fn volume(&self) -> usize {
        (0..3).map(|a| self.hi[a] - self.lo[a]).product()
    }
}

/// Per-Gaussian cull boxes; `None` when the footprint misses the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CullList {
    pub boxes: Vec<Option<IndexBox>>,
}

impl CullList {
    pub fn total_volume(&self) -> usize {
        self.boxes.iter().flatten().map(IndexBox::volume).sum()
    }
}

/// World half-extent of the `cutoff`-sigma ellipsoid along each axis:
/// `cutoff · sqrt(Σ_aa)`.
pub(crate) fn half_extent(rot: &[[f64; 3]; 3], scale: &[f64], cutoff: f64) -> [f64; 3] {
    let mut e = [0.0; 3];
    for (a, ea) in e.iter_mut().enumerate() {
        let var: f64 = (0..3).map(|k| (rot[a][k] * scale[k]).powi(2)).sum();
        *ea = cutoff * var.sqrt();
    }
    e
}

pub(crate) fn index_box(spec: &GridSpec, mean: &[f64], extent: &[f64; 3]) -> Option<IndexBox> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        // Voxel i has its centre at min + (i + ½)·size.
        let slack = 1e-9;
        let first = ((mean[a] - extent[a] - spec.min_corner[a]) / spec.voxel_size - 0.5 - slack).ceil();
        let last = ((mean[a] + extent[a] - spec.min_corner[a]) / spec.voxel_size - 0.5 + slack).floor();
        let first = first.max(0.0);
        let last = last.min(spec.dims[a] as f64 - 1.0);
        if !(first <= last) {
            return None;
        }
        lo[a] = first as usize;
        hi[a] = last as usize + 1;
    }
    Some(IndexBox { lo, hi })
}

/// Index-space bounding boxes of each Gaussian's `cutoff_sigma` ellipsoid,
/// clamped to the grid. Conservative: may include voxels beyond the cutoff,
/// never excludes one within it.
pub fn cull(gaussians: &GaussianArrays, spec: &GridSpec, cfg: &SplatConfig) -> CullList {
    let boxes = (0..gaussians.len())
        .map(|i| {
            let rot = gaussians.rotation_matrix(i);
            let extent = half_extent(&rot, gaussians.scale(i), cfg.cutoff_sigma);
            index_box(spec, gaussians.mean(i), &extent)
        })
        .collect();
    CullList { boxes }
}
