//! Scene representation: semantic Gaussians, voxel lattices and the
//! geometry that connects them.

mod io;

pub use io::{read_gaussians_binary, read_gaussians_json, write_gaussians_binary, write_gaussians_json};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Quat, Vec3};

/// Default semantic class count: 16 labelled classes plus empty at index 0.
pub const DEFAULT_NUM_CLASSES: usize = 17;

/// Default per-Gaussian query width.
pub const DEFAULT_CHANNEL_WIDTH: usize = 128;

/// Class names for the default 17-class layout. Index 0 is empty.
pub const DEFAULT_CLASS_NAMES: [&str; DEFAULT_NUM_CLASSES] = [
    "empty",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

/// Tolerance on `|rotation|` for a stored Gaussian.
const UNIT_QUAT_TOL: f64 = 1e-9;
/// Quaternions further than this from unit length are rejected by
/// [`build_covariance`] instead of being renormalized.
const RENORMALIZE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticGaussian {
    pub mean: Vec3,
    pub scale: Vec3,
    /// Unit quaternion, `[w, x, y, z]`.
    pub rotation: Quat,
    pub opacity: f64,
    pub logits: Vec<f64>,
}

impl SemanticGaussian {
    pub fn new(mean: Vec3, scale: Vec3, rotation: Quat, opacity: f64, logits: Vec<f64>) -> Result<Self> {
        let g = Self {
            mean,
            scale,
            rotation,
            opacity,
            logits,
        };
        g.validate()?;
        Ok(g)
    }

    /// Isotropic, axis-aligned Gaussian with zero logits.
    pub fn isotropic(mean: Vec3, sigma: f64, opacity: f64, num_classes: usize) -> Self {
        Self {
            mean,
            scale: [sigma; 3],
            rotation: geometry::IDENTITY_QUAT,
            opacity,
            logits: vec![0.0; num_classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("non-finite mean {:?}", self.mean)));
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Domain(format!("scale must be positive, got {:?}", self.scale)));
        }
        let n = geometry::quat_norm(&self.rotation);
        if (n - 1.0).abs() > UNIT_QUAT_TOL {
            return Err(Error::Domain(format!("rotation norm {n} is not 1")));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Domain(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if !self.logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite logits".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        geometry::quat_to_mat(&self.rotation)
    }

    pub fn covariance(&self) -> Result<Mat3> {
        build_covariance(&self.scale, &self.rotation)
    }
}

/// Gaussians plus one query row per Gaussian (`P × D`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<SemanticGaussian>,
    pub queries: Vec<f64>,
    pub channel_width: usize,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<SemanticGaussian>, queries: Vec<f64>, channel_width: usize) -> Result<Self> {
        let set = Self {
            gaussians,
            queries,
            channel_width,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.gaussians.first().map_or(0, |g| g.logits.len())
    }

    pub fn query(&self, i: usize) -> &[f64] {
        &self.queries[i * self.channel_width..(i + 1) * self.channel_width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_width == 0 {
            return Err(Error::Domain("channel width must be positive".into()));
        }
        if self.queries.len() != self.gaussians.len() * self.channel_width {
            return Err(Error::Domain(format!(
                "queries hold {} values, expected {} x {}",
                self.queries.len(),
                self.gaussians.len(),
                self.channel_width
            )));
        }
        let c = self.num_classes();
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate().map_err(|e| Error::Domain(format!("gaussian {i}: {e}")))?;
            if g.logits.len() != c {
                return Err(Error::Domain(format!("gaussian {i} has {} logits, expected {c}", g.logits.len())));
            }
        }
        Ok(())
    }
}

/// World-aligned voxel lattice. Voxel `(i, j, k)` covers the half-open box
/// `[min + idx·size, min + (idx+1)·size)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min_corner: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(min_corner: Vec3, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        let spec = Self {
            min_corner,
            voxel_size,
            dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 200×200×16 lattice over [-50, 50]² × [-5, 3] at 0.5 m.
    pub fn paper_scale() -> Self {
        Self {
            min_corner: [-50.0, -50.0, -5.0],
            voxel_size: 0.5,
            dims: [200, 200, 16],
        }
    }

    /// Reduced 64×64×8 lattice at 0.5 m centred on the origin in x/y.
    pub fn desk_scale() -> Self {
        Self {
            min_corner: [-16.0, -16.0, -2.0],
            voxel_size: 0.5,
            dims: [64, 64, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Domain(format!("voxel size must be positive, got {}", self.voxel_size)));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Domain(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if !self.min_corner.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite grid corner".into()));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn max_corner(&self) -> Vec3 {
        [
            self.min_corner[0] + self.dims[0] as f64 * self.voxel_size,
            self.min_corner[1] + self.dims[1] as f64 * self.voxel_size,
            self.min_corner[2] + self.dims[2] as f64 * self.voxel_size,
        ]
    }

    /// Row-major linear index with x varying fastest.
    #[inline]
    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    #[inline]
    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let x = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Centre of voxel `idx` without range checking.
    #[inline]
    pub fn center_unchecked(&self, idx: [usize; 3]) -> Vec3 {
        [
            self.min_corner[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.min_corner[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.min_corner[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        ]
    }
}

/// Per-voxel occupancy, optional class distribution and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGrid {
    pub spec: GridSpec,
    pub num_classes: usize,
    pub occupancy: Vec<f64>,
    /// `num_voxels × num_classes`, present after semantic splatting.
    pub class_probs: Option<Vec<f64>>,
    pub labels: Vec<u16>,
}

impl SemanticGrid {
    /// All-empty grid.
    pub fn empty(spec: GridSpec, num_classes: usize) -> Self {
        let n = spec.num_voxels();
        Self {
            spec,
            num_classes,
            occupancy: vec![0.0; n],
            class_probs: None,
            labels: vec![0; n],
        }
    }

    /// Ground-truth style grid: occupancy is the indicator of a non-empty label.
    pub fn from_labels(spec: GridSpec, num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        let occupancy = labels.iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect();
        let grid = Self {
            spec,
            num_classes,
            occupancy,
            class_probs: None,
            labels,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.spec.num_voxels();
        if self.occupancy.len() != n || self.labels.len() != n {
            return Err(Error::Domain(format!(
                "grid arrays sized {} / {}, expected {n}",
                self.occupancy.len(),
                self.labels.len()
            )));
        }
        if self.occupancy.iter().any(|&o| !(0.0..=1.0).contains(&o)) {
            return Err(Error::Domain("occupancy outside [0, 1]".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::Domain(format!("label {bad} >= class count {}", self.num_classes)));
        }
        if let Some(probs) = &self.class_probs {
            if probs.len() != n * self.num_classes {
                return Err(Error::Domain("class_probs has the wrong size".into()));
            }
        }
        Ok(())
    }

    pub fn label_at(&self, idx: [usize; 3]) -> u16 {
        self.labels[self.spec.linear_index(idx)]
    }
}

/// `Σ = R diag(s)² Rᵀ`.
///
/// Quaternions within 1e-6 of unit length are renormalized; anything further
/// off is rejected.
pub fn build_covariance(scale: &Vec3, rotation: &Quat) -> Result<Mat3> {
    let (s, q) = checked_shape(scale, rotation)?;
    let r = geometry::quat_to_mat(&q);
    Ok(geometry::rotate_diag(&r, &[s[0] * s[0], s[1] * s[1], s[2] * s[2]]))
}

/// `Σ⁻¹ = R diag(1/s²) Rᵀ`, evaluated analytically.
pub fn inverse_covariance(scale: &Vec3, rotation: &Quat) -> Result<Mat3> {
    let (s, q) = checked_shape(scale, rotation)?;
    let r = geometry::quat_to_mat(&q);
    Ok(geometry::rotate_diag(
        &r,
        &[1.0 / (s[0] * s[0]), 1.0 / (s[1] * s[1]), 1.0 / (s[2] * s[2])],
    ))
}

fn checked_shape(scale: &Vec3, rotation: &Quat) -> Result<(Vec3, Quat)> {
    if !scale.iter().all(|&v| v > 0.0 && v.is_finite()) {
        return Err(Error::Domain(format!("scale must be positive, got {scale:?}")));
    }
    let n = geometry::quat_norm(rotation);
    if (n - 1.0).abs() > RENORMALIZE_TOL {
        return Err(Error::Domain(format!("quaternion norm {n} is not within 1e-6 of 1")));
    }
    let q = [rotation[0] / n, rotation[1] / n, rotation[2] / n, rotation[3] / n];
    Ok((*scale, q))
}

/// Unnormalized density `exp(-½ (x-m)ᵀ Σ⁻¹ (x-m))`, peak 1 at the mean.
pub fn gaussian_weight(x: &Vec3, g: &SemanticGaussian) -> Result<f64> {
    let r = g.rotation_matrix();
    if !g.scale.iter().all(|&s| s > 0.0) {
        return Err(Error::Domain(format!("scale must be positive, got {:?}", g.scale)));
    }
    let d = geometry::sub(x, &g.mean);
    let local = geometry::mat_t_vec(&r, &d);
    let maha: f64 = (0..3).map(|k| (local[k] / g.scale[k]).powi(2)).sum();
    Ok((-0.5 * maha).exp())
}

/// Centre of voxel `idx` in world coordinates.
pub fn voxel_center(spec: &GridSpec, idx: [usize; 3]) -> Result<Vec3> {
    if (0..3).any(|a| idx[a] >= spec.dims[a]) {
        return Err(Error::Domain(format!("voxel index {idx:?} outside dims {:?}", spec.dims)));
    }
    Ok(spec.center_unchecked(idx))
}

/// Voxel containing `p` (floor convention), or `None` outside the extent.
pub fn world_to_voxel(spec: &GridSpec, p: &Vec3) -> Option<[usize; 3]> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let f = ((p[a] - spec.min_corner[a]) / spec.voxel_size).floor();
        if !(f >= 0.0 && f < spec.dims[a] as f64) {
            return None;
        }
        idx[a] = f as usize;
    }
    Some(idx)
}
