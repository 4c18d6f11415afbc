//! Synthetic scenes: voxel ground truth from placed primitives, surface
//! point clouds, camera rigs, and feature maps standing in for backbone
//! outputs.

mod io;
mod render;


use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{intrinsics_for_fov, look_extrinsics, FeaturePyramid, SensorModel};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::model::{GridSpec, SemanticGrid, DEFAULT_NUM_CLASSES};
use crate::refine::{Modality, SceneInputs};

pub use io::{read_bundle, write_bundle, BundleManifest};
pub use render::{
    camera_visible_voxels, raycast, render_bev_features, render_camera_features, BevKind, ClassCodes, RenderNoise,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Box,
    Wall,
    Cylinder,
}

/// Distribution of one kind of randomly placed object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRule {
    pub kind: ObjectKind,
    pub class: u16,
    /// Length (x), width (y), height (z) bounds in meters; a cylinder's
    /// diameter is its length.
    pub size_min: Vec3,
    pub size_max: Vec3,
    #[serde(default)]
    pub dynamic: bool,
    /// Relative frequency.
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// An object standing on the ground at a fixed pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacedObject {
    pub kind: ObjectKind,
    pub class: u16,
    /// Footprint centre (x, y).
    pub center: [f64; 2],
    /// Rotation about +z, radians.
    pub yaw: f64,
    pub size: Vec3,
    #[serde(default)]
    pub velocity: [f64; 2],
}

impl PlacedObject {
    pub fn contains(&self, p: &Vec3, base_z: f64) -> bool {
        if p[2] < base_z || p[2] > base_z + self.size[2] {
            return false;
        }
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        match self.kind {
            ObjectKind::Box | ObjectKind::Wall => lx.abs() <= 0.5 * self.size[0] && ly.abs() <= 0.5 * self.size[1],
            ObjectKind::Cylinder => lx * lx + ly * ly <= 0.25 * self.size[0] * self.size[0],
        }
    }

    /// Radius of the footprint's bounding circle.
    pub fn radius(&self) -> f64 {
        match self.kind {
            ObjectKind::Cylinder => 0.5 * self.size[0],
            _ => 0.5 * self.size[0].hypot(self.size[1]),
        }
    }

    pub fn is_dynamic(&self) -> bool {
        self.velocity != [0.0, 0.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    pub count: usize,
    /// Camera height above the ground surface (meters).
    pub height: f64,
    /// Yaw of the first camera; the rest are evenly spaced.
    pub yaw_start: f64,
    /// Downward tilt (radians).
    pub pitch: f64,
    /// Horizontal field of view (radians).
    pub hfov: f64,
    /// `(H, W)` of level 0.
    pub image_dims: [usize; 2],
    /// Rig position (x, y).
    pub center: [f64; 2],
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            count: 4,
            height: 1.6,
            yaw_start: 0.0,
            pitch: 0.1,
            hfov: 1.75,
            image_dims: [32, 48],
            center: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Additive Gaussian feature noise.
    pub feature_sigma: f64,
    /// Per-pixel dropout of camera features.
    pub camera_dropout: f64,
    /// Per-cell dropout of lidar BEV features.
    pub lidar_dropout: f64,
    /// Probability that an occupied cell shows up in radar BEV.
    pub radar_keep: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            feature_sigma: 0.0,
            camera_dropout: 0.0,
            lidar_dropout: 0.0,
            radar_keep: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: GridSpec,
    pub num_classes: usize,
    pub ground: bool,
    pub ground_class: u16,
    /// Inclusive range of randomly placed objects.
    pub object_count: [usize; 2],
    pub objects: Vec<ObjectRule>,
    /// Objects at fixed poses, rasterized after the random ones.
    pub placed: Vec<PlacedObject>,
    /// Free radius kept around the camera rig (meters).
    pub clearance: f64,
    pub max_retries: usize,
    pub rig: CameraRig,
    pub levels: usize,
    pub feature_channels: usize,
    /// `(H, W)` of BEV maps; defaults to the grid's `(ny, nx)`.
    pub bev_dims: Option<[usize; 2]>,
    pub point_count: usize,
    /// Seed of the class-code table, shared across scenes.
    pub code_seed: u64,
    /// Speed of dynamic objects (m/s).
    pub dynamic_speed: f64,
    pub noise: NoiseSpec,
}

pub fn default_object_rules() -> Vec<ObjectRule> {
    let rule = |kind, class, size_min, size_max, dynamic| ObjectRule {
        kind,
        class,
        size_min,
        size_max,
        dynamic,
        weight: 1.0,
    };
    vec![
        rule(ObjectKind::Box, 4, [3.5, 1.6, 1.4], [4.5, 2.0, 1.8], true),
        rule(ObjectKind::Cylinder, 7, [0.6, 0.6, 1.6], [0.9, 0.9, 1.9], true),
        rule(ObjectKind::Box, 15, [2.0, 2.0, 2.0], [5.0, 5.0, 3.5], false),
        rule(ObjectKind::Cylinder, 16, [1.0, 1.0, 1.5], [2.5, 2.5, 3.0], false),
        rule(ObjectKind::Wall, 1, [2.0, 1.0, 0.8], [5.0, 1.0, 1.2], false),
    ]
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridSpec::desk_scale(),
            num_classes: DEFAULT_NUM_CLASSES,
            ground: true,
            ground_class: 11,
            object_count: [3, 8],
            objects: default_object_rules(),
            placed: Vec::new(),
            clearance: 1.5,
            max_retries: 100,
            rig: CameraRig::default(),
            levels: 2,
            feature_channels: 32,
            bev_dims: None,
            point_count: 2048,
            code_seed: 0,
            dynamic_speed: 5.0,
            noise: NoiseSpec::default(),
        }
    }
}

impl SceneSpec {
    /// Small scenes used by the toy training presets: 32×32×8 at 0.5 m.
    pub fn toy() -> Self {
        Self {
            grid: GridSpec::new([-8.0, -8.0, -2.0], 0.5, [32, 32, 8]).expect("valid grid"),
            object_count: [2, 5],
            rig: CameraRig {
                image_dims: [24, 32],
                ..CameraRig::default()
            },
            feature_channels: 20,
            point_count: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.grid.validate()?;
        if !self.ground {
            return bad("ground must be enabled so scenes are non-degenerate".into());
        }
        if self.num_classes < 2 || self.ground_class == 0 || self.ground_class as usize >= self.num_classes {
            return bad(format!("ground_class {} invalid for {} classes", self.ground_class, self.num_classes));
        }
        if self.object_count[0] > self.object_count[1] {
            return bad("object_count must be an ordered range".into());
        }
        if self.object_count[1] > 0 && self.objects.iter().all(|r| r.weight <= 0.0) {
            return bad("objects need at least one rule with positive weight".into());
        }
        for (i, r) in self.objects.iter().enumerate() {
            if r.class == 0 || r.class as usize >= self.num_classes {
                return bad(format!("objects[{i}].class {} out of range", r.class));
            }
            if (0..3).any(|a| !(r.size_min[a] > 0.0 && r.size_min[a] <= r.size_max[a])) {
                return bad(format!("objects[{i}] sizes must satisfy 0 < size_min <= size_max"));
            }
            if !(r.weight >= 0.0) {
                return bad(format!("objects[{i}].weight must be non-negative"));
            }
        }
        for (i, o) in self.placed.iter().enumerate() {
            if o.class == 0 || o.class as usize >= self.num_classes {
                return bad(format!("placed[{i}].class {} out of range", o.class));
            }
            if o.size.iter().any(|&s| !(s > 0.0)) {
                return bad(format!("placed[{i}].size must be positive"));
            }
        }
        if self.rig.count == 0 || self.rig.image_dims.contains(&0) || !(self.rig.hfov > 0.0 && self.rig.hfov < PI) {
            return bad("rig needs at least one camera, non-empty images and 0 < hfov < pi".into());
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.feature_channels < 3 {
            return bad("feature_channels must be at least 3".into());
        }
        let n = &self.noise;
        for (name, p) in [
            ("camera_dropout", n.camera_dropout),
            ("lidar_dropout", n.lidar_dropout),
            ("radar_keep", n.radar_keep),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("noise.{name} must lie in [0, 1]"));
            }
        }
        if !(n.feature_sigma >= 0.0) {
            return bad("noise.feature_sigma must be non-negative".into());
        }
        if let Some(d) = self.bev_dims {
            if d.contains(&0) {
                return bad("bev_dims must be positive".into());
            }
        }
        Ok(())
    }

    /// Height at which objects stand.
    pub fn base_z(&self) -> f64 {
        self.grid.min_corner[2] + if self.ground { self.grid.voxel_size } else { 0.0 }
    }

    pub fn cameras(&self) -> Vec<SensorModel> {
        let r = &self.rig;
        let [h, w] = r.image_dims;
        (0..r.count)
            .map(|i| {
                let yaw = r.yaw_start + 2.0 * PI * i as f64 / r.count as f64;
                SensorModel::Camera {
                    intrinsics: intrinsics_for_fov(h, w, r.hfov),
                    extrinsics: look_extrinsics([r.center[0], r.center[1], self.base_z() + r.height], yaw, r.pitch),
                    image_dims: (h, w),
                }
            })
            .collect()
    }

    pub fn bev_sensor(&self) -> SensorModel {
        let g = &self.grid;
        let hi = g.max_corner();
        let [h, w] = self.bev_dims.unwrap_or([g.dims[1], g.dims[0]]);
        SensorModel::Bev {
            extent_min: [g.min_corner[0], g.min_corner[1]],
            extent_max: [hi[0], hi[1]],
            map_dims: (h, w),
        }
    }
}

/// Everything generated for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub gt: SemanticGrid,
    /// Objects in rasterization order (random first, then placed).
    pub objects: Vec<PlacedObject>,
    pub points: Vec<Vec3>,
    pub point_classes: Vec<u16>,
    pub rig: Vec<SensorModel>,
    pub pyramids: BTreeMap<Modality, Vec<FeaturePyramid>>,
}

impl SceneBundle {
    pub fn inputs(&self) -> SceneInputs {
        SceneInputs {
            sensors: self.pyramids.clone(),
            points: self.points.clone(),
        }
    }

    /// Index of the object owning each voxel (the last one containing its centre).
    pub fn ownership(&self) -> Vec<Option<usize>> {
        ownership(&self.spec, &self.objects)
    }
}

/// Per-stage random streams derived from the scene seed.
#[derive(Clone, Copy)]
enum Stage {
    Layout = 1,
    Points = 2,
    Camera = 3,
    Lidar = 4,
    Radar = 5,
    Preset = 6,
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

fn pick_rule<'a>(rng: &mut impl Rng, rules: &'a [ObjectRule]) -> &'a ObjectRule {
    let total: f64 = rules.iter().map(|r| r.weight.max(0.0)).sum();
    let mut x = rng.random_range(0.0..total);
    for r in rules {
        let w = r.weight.max(0.0);
        if x < w {
            return r;
        }
        x -= w;
    }
    rules.iter().rev().find(|r| r.weight > 0.0).expect("validated")
}

fn place_random(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Vec<PlacedObject>> {
    let [lo, hi] = spec.object_count;
    let count = if hi == 0 { 0 } else { rng.random_range(lo..=hi) };
    let g = &spec.grid;
    let max = g.max_corner();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rule = pick_rule(rng, &spec.objects);
        let size = [0, 1, 2].map(|a| {
            if rule.size_min[a] == rule.size_max[a] {
                rule.size_min[a]
            } else {
                rng.random_range(rule.size_min[a]..=rule.size_max[a])
            }
        });
        let mut obj = PlacedObject {
            kind: rule.kind,
            class: rule.class,
            center: [0.0; 2],
            yaw: rng.random_range(0.0..PI),
            size,
            velocity: [0.0; 2],
        };
        let r = obj.radius();
        let mut placed = false;
        for _ in 0..spec.max_retries.max(1) {
            let (x0, x1) = (g.min_corner[0] + r, max[0] - r);
            let (y0, y1) = (g.min_corner[1] + r, max[1] - r);
            if x0 >= x1 || y0 >= y1 {
                break;
            }
            let c = [rng.random_range(x0..x1), rng.random_range(y0..y1)];
            let d = (c[0] - spec.rig.center[0]).hypot(c[1] - spec.rig.center[1]);
            if d >= r + spec.clearance {
                obj.center = c;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Domain(format!(
                "could not place a {:?} of radius {r:.2} m inside the grid with {} m rig clearance after {} tries",
                rule.kind, spec.clearance, spec.max_retries
            )));
        }
        if rule.dynamic {
            let heading = rng.random_range(0.0..2.0 * PI);
            obj.velocity = [spec.dynamic_speed * heading.cos(), spec.dynamic_speed * heading.sin()];
            obj.yaw = heading;
        }
        out.push(obj);
    }
    Ok(out)
}

fn ownership(spec: &SceneSpec, objects: &[PlacedObject]) -> Vec<Option<usize>> {
    let g = &spec.grid;
    let base = spec.base_z();
    (0..g.num_voxels())
        .map(|v| {
            let c = g.center_unchecked(g.unravel(v));
            objects.iter().rposition(|o| o.contains(&c, base))
        })
        .collect()
}

/// Labels from the ground plane (bottom layer) and objects, later objects
/// overwriting earlier ones.
pub fn rasterize(spec: &SceneSpec, objects: &[PlacedObject]) -> SemanticGrid {
    let g = &spec.grid;
    let owner = ownership(spec, objects);
    let labels = (0..g.num_voxels())
        .map(|v| match owner[v] {
            Some(i) => objects[i].class,
            None if spec.ground && g.unravel(v)[2] == 0 => spec.ground_class,
            None => 0,
        })
        .collect();
    SemanticGrid::from_labels(*g, spec.num_classes, labels).expect("labels validated by spec")
}

/// Occupied voxels with at least one empty 6-neighbour inside the grid.
pub fn surface_voxels(gt: &SemanticGrid) -> Vec<usize> {
    let g = &gt.spec;
    (0..g.num_voxels())
        .filter(|&v| {
            if gt.labels[v] == 0 {
                return false;
            }
            let idx = g.unravel(v);
            (0..3).any(|a| {
                [-1i64, 1].iter().any(|&d| {
                    let n = idx[a] as i64 + d;
                    if n < 0 || n >= g.dims[a] as i64 {
                        return false;
                    }
                    let mut j = idx;
                    j[a] = n as usize;
                    gt.labels[g.linear_index(j)] == 0
                })
            })
        })
        .collect()
}

fn sample_points(gt: &SemanticGrid, count: usize, rng: &mut impl Rng) -> (Vec<Vec3>, Vec<u16>) {
    let surface = surface_voxels(gt);
    if surface.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let g = &gt.spec;
    let mut pts = Vec::with_capacity(count);
    let mut classes = Vec::with_capacity(count);
    for _ in 0..count {
        let v = surface[rng.random_range(0..surface.len())];
        let idx = g.unravel(v);
        let p = [0, 1, 2].map(|a| {
            let lo = g.min_corner[a] + idx[a] as f64 * g.voxel_size;
            // Stay strictly inside the voxel after rounding to f32.
            let x = lo + g.voxel_size * rng.random_range(0.01..0.99);
            x as f32 as f64
        });
        pts.push(p);
        classes.push(gt.labels[v]);
    }
    (pts, classes)
}

/// Generates a scene deterministically from `spec.seed`.
pub fn gen_scene(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let mut objects = place_random(spec, &mut stage_rng(spec.seed, Stage::Layout))?;
    objects.extend(spec.placed.iter().cloned());
    let gt = rasterize(spec, &objects);
    let (points, point_classes) = sample_points(&gt, spec.point_count, &mut stage_rng(spec.seed, Stage::Points));
    let rig = spec.cameras();
    let codes = ClassCodes::new(spec.num_classes, spec.feature_channels, spec.code_seed)?;
    let noise = |dropout| RenderNoise {
        sigma: spec.noise.feature_sigma,
        dropout,
    };
    let mut pyramids = BTreeMap::new();
    let mut rng = stage_rng(spec.seed, Stage::Camera);
    let cams = rig
        .iter()
        .map(|s| render_camera_features(&gt, s, spec.levels, &codes, noise(spec.noise.camera_dropout), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    pyramids.insert(Modality::Camera, cams);
    let bev = spec.bev_sensor();
    let lidar = render_bev_features(
        &gt,
        &objects,
        spec,
        &bev,
        BevKind::Lidar,
        &codes,
        noise(spec.noise.lidar_dropout),
        &mut stage_rng(spec.seed, Stage::Lidar),
    )?;
    pyramids.insert(Modality::LidarBev, vec![lidar]);
    let radar = render_bev_features(
        &gt,
        &objects,
        spec,
        &bev,
        BevKind::Radar {
            keep: spec.noise.radar_keep,
        },
        &codes,
        noise(0.0),
        &mut stage_rng(spec.seed, Stage::Radar),
    )?;
    pyramids.insert(Modality::RadarBev, vec![radar]);
    Ok(SceneBundle {
        spec: spec.clone(),
        gt,
        objects,
        points,
        point_classes,
        rig,
        pyramids,
    })
}

/// Class of the objects hidden by the occlusion preset.
pub const HIDDEN_CLASS: u16 = 4;

/// Adds wall-occluded objects: each hidden object stands behind a wall as
/// seen from the rig, so no camera sees it while the BEV maps do.
pub fn occlusion_preset(spec: &SceneSpec) -> SceneSpec {
    let mut out = spec.clone();
    let mut rng = stage_rng(spec.seed, Stage::Preset);
    let half = 0.5 * (spec.grid.dims[0].min(spec.grid.dims[1]) as f64) * spec.grid.voxel_size;
    // Distances scale with the grid but stay inside it.
    let d_wall = (0.35 * half).clamp(2.0, 4.0);
    let d_obj = (0.75 * half).max(d_wall + 2.5);
    let base = rng.random_range(0.0..2.0 * PI);
    for k in 0..2 {
        let theta = base + PI * k as f64 + rng.random_range(-0.3..0.3);
        let dir = [theta.cos(), theta.sin()];
        let at = |d: f64| [spec.rig.center[0] + d * dir[0], spec.rig.center[1] + d * dir[1]];
        out.placed.push(PlacedObject {
            kind: ObjectKind::Wall,
            class: 15,
            center: at(d_wall),
            // Long axis perpendicular to the viewing ray.
            yaw: theta + 0.5 * PI,
            size: [2.2 * d_wall, 1.0, spec.rig.height + 1.5],
            velocity: [0.0; 2],
        });
        out.placed.push(PlacedObject {
            kind: ObjectKind::Box,
            class: HIDDEN_CLASS,
            center: at(d_obj),
            yaw: theta,
            size: [2.0, 1.6, 1.4],
            velocity: [0.0; 2],
        });
    }
    out
}
