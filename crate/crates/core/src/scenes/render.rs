use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{PlacedObject, SceneSpec};
use crate::diff::Tensor;
use crate::encoder::{FeaturePyramid, SensorModel};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::model::SemanticGrid;

/// Fixed per-class feature codes. Channels `0..Cf-2` carry the code,
/// `Cf-2` depth or height, `Cf-1` radar radial velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCodes {
    channels: usize,
    codes: Vec<Vec<f64>>,
}

impl ClassCodes {
    /// Codes are orthonormal when `Cf - 2 >= num_classes - 1`, otherwise
    /// random unit vectors. Class 0 has the zero code.
    pub fn new(num_classes: usize, channels: usize, seed: u64) -> Result<Self> {
        if channels < 3 {
            return Err(Error::Config(format!("feature_channels must be at least 3, got {channels}")));
        }
        let d = channels - 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes = vec![vec![0.0; d]];
        for c in 1..num_classes {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            if c <= d {
                // Gram-Schmidt against earlier codes.
                for prev in &codes[1..] {
                    let p: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(prev).for_each(|(a, b)| *a -= p * b);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            codes.push(v.into_iter().map(|x| ((x / n) as f32) as f64).collect());
        }
        Ok(Self { channels, codes })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.codes.len()
    }

    pub fn code(&self, class: u16) -> &[f64] {
        &self.codes[class as usize]
    }

    /// Class whose code best matches `features` (largest dot product, 0 if none is positive).
    pub fn decode(&self, features: &[f64]) -> u16 {
        let mut best = (0u16, 0.0);
        for (c, code) in self.codes.iter().enumerate().skip(1) {
            let s: f64 = code.iter().zip(features).map(|(a, b)| a * b).sum();
            if s > best.1 {
                best = (c as u16, s);
            }
        }
        best.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderNoise {
    pub sigma: f64,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BevKind {
    /// Top occupied voxel of every column.
    Lidar,
    /// Each occupied column kept with probability `keep`, plus radial velocity.
    Radar { keep: f64 },
}

/// First occupied voxel along `origin + t·dir`, `t >= 0`, with its entry `t`.
pub fn raycast(gt: &SemanticGrid, origin: &Vec3, dir: &Vec3) -> Option<(usize, f64)> {
    let g = &gt.spec;
    let lo = g.min_corner;
    let hi = g.max_corner();
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] >= hi[a] {
                return None;
            }
        } else {
            let ta = (lo[a] - origin[a]) / dir[a];
            let tb = (hi[a] - origin[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 > t1 {
        return None;
    }
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = origin[a] + dir[a] * t0;
        let cell = ((p - lo[a]) / g.voxel_size).floor() as i64;
        idx[a] = cell.clamp(0, g.dims[a] as i64 - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (lo[a] + (idx[a] + 1) as f64 * g.voxel_size - origin[a]) / dir[a];
            t_delta[a] = g.voxel_size / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (lo[a] + idx[a] as f64 * g.voxel_size - origin[a]) / dir[a];
            t_delta[a] = -g.voxel_size / dir[a];
        }
    }
    let mut t_enter = t0;
    loop {
        let v = g.linear_index([idx[0] as usize, idx[1] as usize, idx[2] as usize]);
        if gt.labels[v] != 0 {
            return Some((v, t_enter));
        }
        let a = (0..3).min_by(|&i, &j| t_max[i].total_cmp(&t_max[j])).expect("three axes");
        if t_max[a] > t1 {
            return None;
        }
        t_enter = t_max[a];
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= g.dims[a] as i64 {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}

fn f32_round(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// 2× average pooling; odd borders average the available pixels.
fn pool2(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let src = t.data();
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let (mut s, mut n) = (0.0, 0.0);
                for yy in 2 * y..(2 * y + 2).min(h) {
                    for xx in 2 * x..(2 * x + 2).min(w) {
                        s += src[(ch * h + yy) * w + xx];
                        n += 1.0;
                    }
                }
                out[(ch * h2 + y) * w2 + x] = s / n;
            }
        }
    }
    Tensor::new(vec![c, h2, w2], out).expect("consistent shape")
}

fn build_pyramid(sensor: &SensorModel, base: Tensor, levels: usize, sigma: f64, rng: &mut impl Rng) -> Result<FeaturePyramid> {
    let mut out = vec![base];
    for l in 1..levels {
        let next = pool2(&out[l - 1]);
        out.push(next);
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for t in &mut out {
            t.data_mut().iter_mut().for_each(|x| *x += normal.sample(rng));
        }
    }
    out.iter_mut().for_each(f32_round);
    FeaturePyramid::new(sensor.clone(), out)
}

/// Camera features from a per-pixel raycast: the hit voxel's class code and
/// the inverse camera-frame depth of its centre. Misses are zero.
pub fn render_camera_features(
    gt: &SemanticGrid,
    sensor: &SensorModel,
    levels: usize,
    codes: &ClassCodes,
    noise: RenderNoise,
    rng: &mut impl Rng,
) -> Result<FeaturePyramid> {
    let SensorModel::Camera { intrinsics: k, .. } = sensor else {
        return Err(Error::Config("camera features need a camera sensor".into()));
    };
    sensor.validate()?;
    let (h, w) = sensor.dims();
    let cf = codes.channels();
    let origin = sensor.camera_center().expect("camera");
    let r = match sensor {
        SensorModel::Camera { extrinsics: e, .. } => [
            [e[0][0], e[0][1], e[0][2]],
            [e[1][0], e[1][1], e[1][2]],
            [e[2][0], e[2][1], e[2][2]],
        ],
        _ => unreachable!(),
    };
    let mut data = vec![0.0; cf * h * w];
    for y in 0..h {
        for x in 0..w {
            if noise.dropout > 0.0 && rng.random::<f64>() < noise.dropout {
                continue;
            }
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let dc = [(px - k[0][2] - k[0][1] * (py - k[1][2]) / k[1][1]) / k[0][0], (py - k[1][2]) / k[1][1], 1.0];
            let dir = geometry::mat_t_vec(&r, &dc);
            if let Some((v, _)) = raycast(gt, &origin, &dir) {
                let c = gt.spec.center_unchecked(gt.spec.unravel(v));
                let depth = sensor.to_camera_frame(&c).expect("camera")[2];
                let code = codes.code(gt.labels[v]);
                for (ch, &val) in code.iter().enumerate() {
                    data[(ch * h + y) * w + x] = val;
                }
                if depth > 0.0 {
                    data[((cf - 2) * h + y) * w + x] = 1.0 / depth;
                }
            }
        }
    }
    build_pyramid(sensor, Tensor::new(vec![cf, h, w], data)?, levels, noise.sigma, rng)
}

/// Top-down features: per map cell, the code and centre height of the top
/// occupied voxel in the column below the cell centre.
#[allow(clippy::too_many_arguments)]
pub fn render_bev_features(
    gt: &SemanticGrid,
    objects: &[PlacedObject],
    spec: &SceneSpec,
    sensor: &SensorModel,
    kind: BevKind,
    codes: &ClassCodes,
    noise: RenderNoise,
    rng: &mut impl Rng,
) -> Result<FeaturePyramid> {
    let SensorModel::Bev {
        extent_min,
        extent_max,
        map_dims: (h, w),
    } = *sensor
    else {
        return Err(Error::Config("BEV features need a BEV sensor".into()));
    };
    sensor.validate()?;
    let g = &gt.spec;
    let cf = codes.channels();
    let base = spec.base_z();
    let mut data = vec![0.0; cf * h * w];
    for row in 0..h {
        for col in 0..w {
            let x = extent_min[0] + (col as f64 + 0.5) / w as f64 * (extent_max[0] - extent_min[0]);
            let y = extent_min[1] + (row as f64 + 0.5) / h as f64 * (extent_max[1] - extent_min[1]);
            let i = ((x - g.min_corner[0]) / g.voxel_size).floor();
            let j = ((y - g.min_corner[1]) / g.voxel_size).floor();
            if i < 0.0 || j < 0.0 || i >= g.dims[0] as f64 || j >= g.dims[1] as f64 {
                continue;
            }
            let Some(top) = (0..g.dims[2]).rev().map(|kz| g.linear_index([i as usize, j as usize, kz])).find(|&v| gt.labels[v] != 0)
            else {
                continue;
            };
            let drop = match kind {
                BevKind::Lidar => noise.dropout > 0.0 && rng.random::<f64>() < noise.dropout,
                BevKind::Radar { keep } => rng.random::<f64>() >= keep,
            };
            if drop {
                continue;
            }
            let c = g.center_unchecked(g.unravel(top));
            for (ch, &val) in codes.code(gt.labels[top]).iter().enumerate() {
                data[(ch * h + row) * w + col] = val;
            }
            data[((cf - 2) * h + row) * w + col] = c[2];
            if let BevKind::Radar { .. } = kind {
                if let Some(o) = objects.iter().rev().find(|o| o.contains(&c, base)) {
                    let d = [c[0] - spec.rig.center[0], c[1] - spec.rig.center[1]];
                    let n = d[0].hypot(d[1]);
                    if n > 1e-9 {
                        data[((cf - 1) * h + row) * w + col] = (o.velocity[0] * d[0] + o.velocity[1] * d[1]) / n;
                    }
                }
            }
        }
    }
    build_pyramid(sensor, Tensor::new(vec![cf, h, w], data)?, spec.levels, noise.sigma, rng)
}

/// Occupied voxels whose centre some camera sees directly: inside its
/// image and first along the ray from the camera centre.
pub fn camera_visible_voxels(gt: &SemanticGrid, cameras: &[SensorModel]) -> Vec<bool> {
    let g = &gt.spec;
    let mut vis = vec![false; g.num_voxels()];
    for (v, out) in vis.iter_mut().enumerate() {
        if gt.labels[v] == 0 {
            continue;
        }
        let c = g.center_unchecked(g.unravel(v));
        *out = cameras.iter().any(|cam| {
            if cam.project(&c).is_none() {
                return false;
            }
            let o = cam.camera_center().expect("camera");
            let dir = geometry::sub(&c, &o);
            raycast(gt, &o, &dir).is_some_and(|(hit, _)| hit == v)
        });
    }
    vis
}
