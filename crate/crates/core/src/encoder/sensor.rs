use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};

/// Points closer than this to a camera (along its optical axis) are invisible.
pub const NEAR_PLANE: f64 = 0.1;

/// Projection model of one sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SensorModel {
    /// Pinhole camera. `extrinsics` maps world to camera coordinates
    /// (x right, y down, z forward); `image_dims` is `(H, W)` in pixels.
    Camera {
        intrinsics: Mat3,
        extrinsics: [[f64; 4]; 4],
        image_dims: (usize, usize),
    },
    /// Orthographic top-down map over `[min, max]` in world x/y. Map rows
    /// follow y, columns follow x.
    Bev {
        extent_min: [f64; 2],
        extent_max: [f64; 2],
        map_dims: (usize, usize),
    },
}

/// Normalized image coordinates plus their derivative w.r.t. the world point.
pub type Projection = ([f64; 2], [[f64; 3]; 2]);

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            SensorModel::Camera {
                intrinsics,
                extrinsics,
                image_dims,
            } => {
                if geometry::det(intrinsics).abs() < 1e-12 {
                    return Err(Error::Domain("camera intrinsics are singular".into()));
                }
                let r = rotation_part(extrinsics);
                let rtr = geometry::mat_mul(&geometry::transpose(&r), &r);
                for (i, row) in rtr.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        let e = if i == j { 1.0 } else { 0.0 };
                        if (v - e).abs() > 1e-6 {
                            return Err(Error::Domain("camera extrinsics are not a rigid transform".into()));
                        }
                    }
                }
                if (geometry::det(&r) - 1.0).abs() > 1e-6 || extrinsics[3] != [0.0, 0.0, 0.0, 1.0] {
                    return Err(Error::Domain("camera extrinsics are not a proper rigid transform".into()));
                }
                if image_dims.0 == 0 || image_dims.1 == 0 {
                    return Err(Error::Domain("empty image".into()));
                }
            }
            SensorModel::Bev {
                extent_min,
                extent_max,
                map_dims,
            } => {
                if !(extent_max[0] > extent_min[0] && extent_max[1] > extent_min[1]) {
                    return Err(Error::Domain("BEV extent is empty".into()));
                }
                if map_dims.0 == 0 || map_dims.1 == 0 {
                    return Err(Error::Domain("empty BEV map".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_camera(&self) -> bool {
        matches!(self, SensorModel::Camera { .. })
    }

    /// `(H, W)` of the sensor's native (level 0) resolution.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            SensorModel::Camera { image_dims, .. } => *image_dims,
            SensorModel::Bev { map_dims, .. } => *map_dims,
        }
    }

    /// World point to camera frame (cameras only).
    pub fn to_camera_frame(&self, p: &Vec3) -> Option<Vec3> {
        match self {
            SensorModel::Camera { extrinsics, .. } => {
                let r = rotation_part(extrinsics);
                let t = [extrinsics[0][3], extrinsics[1][3], extrinsics[2][3]];
                Some(geometry::add(&geometry::mat_vec(&r, p), &t))
            }
            SensorModel::Bev { .. } => None,
        }
    }

    /// Camera centre in world coordinates (cameras only).
    pub fn camera_center(&self) -> Option<Vec3> {
        match self {
            SensorModel::Camera { extrinsics, .. } => {
                let r = rotation_part(extrinsics);
                let t = [extrinsics[0][3], extrinsics[1][3], extrinsics[2][3]];
                let c = geometry::mat_t_vec(&r, &t);
                Some([-c[0], -c[1], -c[2]])
            }
            SensorModel::Bev { .. } => None,
        }
    }

    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        self.project_with_jacobian(p).map(|(uv, _)| uv)
    }

    /// Projection to normalized `(u, v) ∈ [0, 1]²`, `None` when invisible.
    pub fn project_with_jacobian(&self, p: &Vec3) -> Option<Projection> {
        match self {
            SensorModel::Camera {
                intrinsics: k,
                extrinsics,
                image_dims: (h, w),
            } => {
                let r = rotation_part(extrinsics);
                let xs = self.to_camera_frame(p)?;
                if xs[2] <= NEAR_PLANE {
                    return None;
                }
                let hom = geometry::mat_vec(k, &xs);
                let (hw, wf) = (*h as f64, *w as f64);
                let uv = [hom[0] / hom[2] / wf, hom[1] / hom[2] / hw];
                if !in_unit_square(&uv) {
                    return None;
                }
                // d(px)/d(xs_j) = (K0j h2 - h0 K2j) / h2²
                let mut jac = [[0.0; 3]; 2];
                for (row, (norm, num)) in [(wf, 0usize), (hw, 1usize)].into_iter().enumerate() {
                    let mut dxs = [0.0; 3];
                    for (j, d) in dxs.iter_mut().enumerate() {
                        *d = (k[num][j] * hom[2] - hom[num] * k[2][j]) / (hom[2] * hom[2]) / norm;
                    }
                    jac[row] = geometry::mat_t_vec(&r, &dxs);
                }
                Some((uv, jac))
            }
            SensorModel::Bev {
                extent_min,
                extent_max,
                ..
            } => {
                let sx = extent_max[0] - extent_min[0];
                let sy = extent_max[1] - extent_min[1];
                let uv = [(p[0] - extent_min[0]) / sx, (p[1] - extent_min[1]) / sy];
                if !in_unit_square(&uv) {
                    return None;
                }
                Some((uv, [[1.0 / sx, 0.0, 0.0], [0.0, 1.0 / sy, 0.0]]))
            }
        }
    }
}

fn in_unit_square(uv: &[f64; 2]) -> bool {
    (0.0..=1.0).contains(&uv[0]) && (0.0..=1.0).contains(&uv[1])
}

pub(crate) fn rotation_part(m: &[[f64; 4]; 4]) -> Mat3 {
    [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ]
}

/// Builds world-to-camera extrinsics for a camera at `position` whose optical
/// axis points along `yaw` (radians, from +x towards +y) in the ground plane,
/// tilted down by `pitch` radians.
pub fn look_extrinsics(position: Vec3, yaw: f64, pitch: f64) -> [[f64; 4]; 4] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    // Camera axes in world coordinates.
    let forward = [cy * cp, sy * cp, -sp];
    let right = [sy, -cy, 0.0];
    let down = [
        forward[1] * right[2] - forward[2] * right[1],
        forward[2] * right[0] - forward[0] * right[2],
        forward[0] * right[1] - forward[1] * right[0],
    ];
    let r = [right, down, forward];
    let t = geometry::mat_vec(&r, &position);
    [
        [r[0][0], r[0][1], r[0][2], -t[0]],
        [r[1][0], r[1][1], r[1][2], -t[1]],
        [r[2][0], r[2][1], r[2][2], -t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Pinhole intrinsics for a horizontal field of view.
pub fn intrinsics_for_fov(h: usize, w: usize, hfov: f64) -> Mat3 {
    let f = 0.5 * w as f64 / (0.5 * hfov).tan();
    [[f, 0.0, 0.5 * w as f64], [0.0, f, 0.5 * h as f64], [0.0, 0.0, 1.0]]
}

/// One sensor's multi-scale feature maps, each `Cf × H_l × W_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub sensor: SensorModel,
    pub levels: Arc<[Tensor]>,
}

impl FeaturePyramid {
    pub fn new(sensor: SensorModel, levels: Vec<Tensor>) -> Result<Self> {
        let p = Self {
            sensor,
            levels: levels.into(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let first = self.levels.first().ok_or_else(|| Error::Domain("feature pyramid has no levels".into()))?;
        if first.rank() != 3 {
            return Err(Error::shape("feature_pyramid", format!("level shape {:?}", first.shape())));
        }
        let cf = first.shape()[0];
        for l in self.levels.iter() {
            if l.rank() != 3 || l.shape()[0] != cf {
                return Err(Error::shape("feature_pyramid", format!("levels disagree on channels: {:?}", l.shape())));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// `(H, W)` of level `l`.
    pub fn level_dims(&self, l: usize) -> (usize, usize) {
        let s = self.levels[l].shape();
        (s[1], s[2])
    }
}
