use rayon::prelude::*;

use super::cull::{cull, CullList, IndexBox};
use super::{SplatConfig, MAX_CONTRIBUTION};
use crate::error::{Error, Result};
use crate::geometry::{self, Mat3};
use crate::model::{GaussianSet, GridSpec, SemanticGaussian, SemanticGrid};

/// Edge length (in voxels) of the forward pass work tiles.
pub(crate) const DEFAULT_TILE: usize = 8;

/// Structure-of-arrays view of `P` Gaussians, the layout the kernels and the
/// tape operate on. Rotations need not be exactly unit length: kernels use
/// `q / |q|`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianArrays {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacities: Vec<f64>,
    pub logits: Vec<f64>,
    pub num_classes: usize,
}

impl GaussianArrays {
    pub fn from_gaussians(gaussians: &[SemanticGaussian]) -> Self {
        let num_classes = gaussians.first().map_or(0, |g| g.logits.len());
        let mut out = Self {
            means: Vec::with_capacity(gaussians.len() * 3),
            scales: Vec::with_capacity(gaussians.len() * 3),
            rotations: Vec::with_capacity(gaussians.len() * 4),
            opacities: Vec::with_capacity(gaussians.len()),
            logits: Vec::with_capacity(gaussians.len() * num_classes),
            num_classes,
        };
        for g in gaussians {
            out.means.extend_from_slice(&g.mean);
            out.scales.extend_from_slice(&g.scale);
            out.rotations.extend_from_slice(&g.rotation);
            out.opacities.push(g.opacity);
            out.logits.extend_from_slice(&g.logits);
        }
        out
    }

    pub fn from_set(set: &GaussianSet) -> Self {
        Self::from_gaussians(&set.gaussians)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.opacities.len();
        if self.means.len() != 3 * p
            || self.scales.len() != 3 * p
            || self.rotations.len() != 4 * p
            || self.logits.len() != p * self.num_classes
        {
            return Err(Error::shape("splat", "inconsistent Gaussian array lengths"));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain("splatting needs strictly positive scales".into()));
        }
        Ok(())
    }

    /// Back to validated domain values (rotations renormalized).
    pub fn to_gaussians(&self) -> Vec<SemanticGaussian> {
        (0..self.len())
            .map(|i| {
                let q = self.rotation(i);
                let n = geometry::quat_norm(&[q[0], q[1], q[2], q[3]]);
                SemanticGaussian {
                    mean: [self.means[3 * i], self.means[3 * i + 1], self.means[3 * i + 2]],
                    scale: [self.scales[3 * i], self.scales[3 * i + 1], self.scales[3 * i + 2]],
                    rotation: [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
                    opacity: self.opacities[i],
                    logits: self.logits(i).to_vec(),
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[3 * i..3 * i + 3]
    }

    pub fn scale(&self, i: usize) -> &[f64] {
        &self.scales[3 * i..3 * i + 3]
    }

    pub fn rotation(&self, i: usize) -> &[f64] {
        &self.rotations[4 * i..4 * i + 4]
    }

    pub fn logits(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    fn unit_rotation(&self, i: usize) -> ([f64; 4], f64) {
        let r = self.rotation(i);
        let q = [r[0], r[1], r[2], r[3]];
        let n = geometry::quat_norm(&q);
        ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
    }

    pub fn rotation_matrix(&self, i: usize) -> Mat3 {
        geometry::quat_to_mat(&self.unit_rotation(i).0)
    }
}

/// Per-Gaussian quantities hoisted out of the voxel loops.
struct Prepared {
    mean: [f64; 3],
    rot: Mat3,
    inv_scale: [f64; 3],
    opacity: f64,
    probs: Vec<f64>,
}

impl Prepared {
    fn build(g: &GaussianArrays, semantics: bool) -> Vec<Self> {
        (0..g.len())
            .map(|i| {
                let m = g.mean(i);
                let s = g.scale(i);
                Self {
                    mean: [m[0], m[1], m[2]],
                    rot: g.rotation_matrix(i),
                    inv_scale: [1.0 / s[0], 1.0 / s[1], 1.0 / s[2]],
                    opacity: g.opacities[i],
                    probs: if semantics { softmax(g.logits(i)) } else { Vec::new() },
                }
            })
            .collect()
    }

    /// Density and the Gaussian-frame offset `u = Rᵀ(x - m)`.
    #[inline(always)]
    fn eval(&self, x: &[f64; 3]) -> (f64, [f64; 3]) {
        let d = [x[0] - self.mean[0], x[1] - self.mean[1], x[2] - self.mean[2]];
        let u = geometry::mat_t_vec(&self.rot, &d);
        let a = u[0] * self.inv_scale[0];
        let b = u[1] * self.inv_scale[1];
        let c = u[2] * self.inv_scale[2];
        ((-0.5 * (a * a + b * b + c * c)).exp(), u)
    }

    /// `S⁻¹Rᵀ(x - m)`.
    #[inline(always)]
    fn scaled_offset(&self, x: &[f64; 3]) -> [f64; 3] {
        let d = [x[0] - self.mean[0], x[1] - self.mean[1], x[2] - self.mean[2]];
        let u = geometry::mat_t_vec(&self.rot, &d);
        [u[0] * self.inv_scale[0], u[1] * self.inv_scale[1], u[2] * self.inv_scale[2]]
    }

    /// Change of [`Self::scaled_offset`] per voxel step along +x.
    #[inline(always)]
    fn x_step(&self, voxel: f64) -> [f64; 3] {
        [0, 1, 2].map(|k| self.rot[0][k] * voxel * self.inv_scale[k])
    }

    #[inline(always)]
    fn mahalanobis_sq(&self, x: &[f64; 3]) -> f64 {
        let d = [x[0] - self.mean[0], x[1] - self.mean[1], x[2] - self.mean[2]];
        let u = geometry::mat_t_vec(&self.rot, &d);
        (0..3).map(|k| (u[k] * self.inv_scale[k]).powi(2)).sum()
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Forward splatting result plus the per-voxel state the reverse pass needs.
#[derive(Clone, Debug)]
pub struct SplatOutput {
    pub occupancy: Vec<f64>,
    /// `N × C`, present when semantics were requested.
    pub class_probs: Option<Vec<f64>>,
    /// `Σ_i a_i g_i` per voxel.
    pub weight_sum: Vec<f64>,
    pub cull: CullList,
}

impl SplatOutput {
    pub fn labels(&self, num_classes: usize, threshold: f64) -> Vec<u16> {
        match &self.class_probs {
            Some(p) => label_voxels(&self.occupancy, p, num_classes, threshold),
            None => self.occupancy.iter().map(|&a| u16::from(a >= threshold)).collect(),
        }
    }

    pub fn into_grid(self, spec: GridSpec, num_classes: usize, threshold: f64) -> SemanticGrid {
        let labels = self.labels(num_classes, threshold);
        SemanticGrid {
            spec,
            num_classes,
            occupancy: self.occupancy,
            class_probs: self.class_probs,
            labels,
        }
    }
}

/// Label rule: empty (0) below the occupancy threshold, otherwise the most
/// probable non-empty class, ties going to the lower index.
pub fn label_voxels(occupancy: &[f64], class_probs: &[f64], num_classes: usize, threshold: f64) -> Vec<u16> {
    occupancy
        .iter()
        .enumerate()
        .map(|(v, &a)| {
            if a < threshold || num_classes < 2 {
                return 0;
            }
            let row = &class_probs[v * num_classes..(v + 1) * num_classes];
            let mut best = 1;
            for c in 2..num_classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

fn tiles_for(spec: &GridSpec, tile: usize) -> [usize; 3] {
    [0, 1, 2].map(|a| spec.dims[a].div_ceil(tile))
}

fn intersect(b: &IndexBox, t: &IndexBox) -> Option<IndexBox> {
    let mut out = *b;
    for a in 0..3 {
        out.lo[a] = b.lo[a].max(t.lo[a]);
        out.hi[a] = b.hi[a].min(t.hi[a]);
        if out.lo[a] >= out.hi[a] {
            return None;
        }
    }
    Some(out)
}

struct TileResult {
    region: IndexBox,
    log1m: Vec<f64>,
    wsum: Vec<f64>,
    wprob: Vec<f64>,
}

pub(crate) fn splat_forward_tiled(
    gaussians: &GaussianArrays,
    spec: &GridSpec,
    cfg: &SplatConfig,
    semantics: bool,
    tile: usize,
) -> Result<SplatOutput> {
    gaussians.validate()?;
    let c = gaussians.num_classes;
    let prepared = Prepared::build(gaussians, semantics);
    let cull = cull(gaussians, spec, cfg);
    let tdims = tiles_for(spec, tile);
    let ntiles = tdims[0] * tdims[1] * tdims[2];

    // Gaussian indices per tile, in ascending order so every voxel
    // accumulates its contributions in the same order whatever the tiling.
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); ntiles];
    for (i, b) in cull.boxes.iter().enumerate() {
        let Some(b) = b else { continue };
        let tlo = [0, 1, 2].map(|a| b.lo[a] / tile);
        let thi = [0, 1, 2].map(|a| (b.hi[a] - 1) / tile);
        for tz in tlo[2]..=thi[2] {
            for ty in tlo[1]..=thi[1] {
                for tx in tlo[0]..=thi[0] {
                    members[tx + tdims[0] * (ty + tdims[1] * tz)].push(i as u32);
                }
            }
        }
    }

    let results: Vec<Option<TileResult>> = members
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            if list.is_empty() {
                return None;
            }
            let tx = t % tdims[0];
            let ty = (t / tdims[0]) % tdims[1];
            let tz = t / (tdims[0] * tdims[1]);
            let lo = [tx * tile, ty * tile, tz * tile];
            let hi = [0, 1, 2].map(|a| (lo[a] + tile).min(spec.dims[a]));
            let region = IndexBox { lo, hi };
            let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
            let nloc = ext[0] * ext[1] * ext[2];
            let mut out = TileResult {
                region,
                log1m: vec![0.0; nloc],
                wsum: vec![0.0; nloc],
                wprob: if semantics { vec![0.0; nloc * c] } else { Vec::new() },
            };
            for &gi in list {
                let gi = gi as usize;
                let p = &prepared[gi];
                let b = intersect(cull.boxes[gi].as_ref().expect("listed"), &region).expect("overlaps tile");
                let step = p.x_step(spec.voxel_size);
                for z in b.lo[2]..b.hi[2] {
                    for y in b.lo[1]..b.hi[1] {
                        // Scaled offset at x = 0 of this row; voxel x adds x·step.
                        let a0 = p.scaled_offset(&spec.center_unchecked([0, y, z]));
                        for x in b.lo[0]..b.hi[0] {
                            let xf = x as f64;
                            let a = [a0[0] + xf * step[0], a0[1] + xf * step[1], a0[2] + xf * step[2]];
                            let q = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
                            if q > DENSE_MAX_MAHALANOBIS_SQ {
                                continue;
                            }
                            let w = p.opacity * (-0.5 * q).exp();
                            if w == 0.0 {
                                continue;
                            }
                            let l = (x - lo[0]) + ext[0] * ((y - lo[1]) + ext[1] * (z - lo[2]));
                            out.log1m[l] += (-w.min(MAX_CONTRIBUTION)).ln_1p();
                            out.wsum[l] += w;
                            if semantics {
                                for (acc, &pc) in out.wprob[l * c..(l + 1) * c].iter_mut().zip(&p.probs) {
                                    *acc += w * pc;
                                }
                            }
                        }
                    }
                }
            }
            Some(out)
        })
        .collect();

    let n = spec.num_voxels();
    let mut occupancy = vec![0.0; n];
    let mut weight_sum = vec![0.0; n];
    let mut class_probs = if semantics { Some(vec![0.0; n * c]) } else { None };
    for r in results.into_iter().flatten() {
        let IndexBox { lo, hi } = r.region;
        let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let l = (x - lo[0]) + ext[0] * ((y - lo[1]) + ext[1] * (z - lo[2]));
                    let v = spec.linear_index([x, y, z]);
                    occupancy[v] = -r.log1m[l].exp_m1();
                    weight_sum[v] = r.wsum[l];
                    if let Some(cp) = class_probs.as_mut() {
                        let denom = r.wsum[l] + cfg.eps;
                        for k in 0..c {
                            cp[v * c + k] = r.wprob[l * c + k] / denom;
                        }
                    }
                }
            }
        }
    }
    Ok(SplatOutput {
        occupancy,
        class_probs,
        weight_sum,
        cull,
    })
}

/// Culled forward splatting; `semantics` also produces class probabilities.
pub fn splat_forward(gaussians: &GaussianArrays, spec: &GridSpec, cfg: &SplatConfig, semantics: bool) -> Result<SplatOutput> {
    splat_forward_tiled(gaussians, spec, cfg, semantics, DEFAULT_TILE)
}

/// Occupancy field `α` over the grid.
pub fn splat_occupancy(gaussians: &GaussianArrays, spec: &GridSpec, cfg: &SplatConfig) -> Result<Vec<f64>> {
    Ok(splat_forward(gaussians, spec, cfg, false)?.occupancy)
}

/// Class probabilities (`N × C`) and labels.
pub fn splat_semantics(gaussians: &GaussianArrays, spec: &GridSpec, cfg: &SplatConfig) -> Result<(Vec<f64>, Vec<u16>)> {
    let out = splat_forward(gaussians, spec, cfg, true)?;
    let labels = out.labels(gaussians.num_classes, cfg.occupancy_threshold);
    Ok((out.class_probs.expect("semantics requested"), labels))
}

/// Squared Mahalanobis distance beyond which `exp(-q/2)` underflows to
/// exactly zero; the dense reference skips the `exp` there.
pub const DENSE_MAX_MAHALANOBIS_SQ: f64 = 1500.0;

/// Reference splatting without culling: every Gaussian at every voxel.
/// Gaussians are the outer loop per z layer; along a voxel row the
/// Gaussian-frame offset advances by a constant step.
pub fn splat_dense(gaussians: &GaussianArrays, spec: &GridSpec, cfg: &SplatConfig, semantics: bool) -> Result<SplatOutput> {
    gaussians.validate()?;
    let c = gaussians.num_classes;
    let prepared = Prepared::build(gaussians, semantics);
    let n = spec.num_voxels();
    let [nx, ny, nz] = spec.dims;
    let layer = nx * ny;
    let mut log1m = vec![0.0; n];
    let mut weight_sum = vec![0.0; n];
    // Without semantics each layer gets a one-element placeholder chunk.
    let mut wprob = vec![0.0; if semantics { n * c } else { nz }];
    let cw = if semantics { c } else { 0 };
    log1m
        .par_chunks_mut(layer)
        .zip(weight_sum.par_chunks_mut(layer))
        .zip(wprob.par_chunks_mut((layer * cw).max(1)))
        .enumerate()
        .for_each(|(z, ((lg, ws), wp))| {
            for p in &prepared {
                let step = p.x_step(spec.voxel_size);
                for y in 0..ny {
                    let mut a = p.scaled_offset(&spec.center_unchecked([0, y, z]));
                    for x in 0..nx {
                        let q = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
                        a = [a[0] + step[0], a[1] + step[1], a[2] + step[2]];
                        if q > DENSE_MAX_MAHALANOBIS_SQ {
                            continue;
                        }
                        let w = p.opacity * (-0.5 * q).exp();
                        if w == 0.0 {
                            continue;
                        }
                        let l = x + nx * y;
                        lg[l] += (-w.min(MAX_CONTRIBUTION)).ln_1p();
                        ws[l] += w;
                        if semantics {
                            for (acc, &pc) in wp[l * c..(l + 1) * c].iter_mut().zip(&p.probs) {
                                *acc += w * pc;
                            }
                        }
                    }
                }
            }
        });
    let occupancy = log1m.iter().map(|l| -l.exp_m1()).collect();
    let class_probs = semantics.then(|| {
        wprob
            .chunks_exact(c)
            .zip(&weight_sum)
            .flat_map(|(row, &w)| row.iter().map(move |p| p / (w + cfg.eps)))
            .collect()
    });
    let full = IndexBox {
        lo: [0; 3],
        hi: spec.dims,
    };
    Ok(SplatOutput {
        occupancy,
        class_probs,
        weight_sum,
        cull: CullList {
            boxes: vec![Some(full); gaussians.len()],
        },
    })
}

/// Occupancy and class distribution at an arbitrary point, counting the
/// Gaussians whose Mahalanobis distance is within the cutoff.
pub fn field_at(gaussians: &GaussianArrays, x: &[f64; 3], cfg: &SplatConfig) -> (f64, Vec<f64>) {
    let prepared = Prepared::build(gaussians, true);
    let cut2 = cfg.cutoff_sigma * cfg.cutoff_sigma;
    let mut log1m = 0.0;
    let mut wsum = 0.0;
    let mut wprob = vec![0.0; gaussians.num_classes];
    for p in &prepared {
        if p.mahalanobis_sq(x) > cut2 {
            continue;
        }
        let w = p.opacity * p.eval(x).0;
        log1m += (-w.min(MAX_CONTRIBUTION)).ln_1p();
        wsum += w;
        for (acc, &pc) in wprob.iter_mut().zip(&p.probs) {
            *acc += w * pc;
        }
    }
    let probs = wprob.iter().map(|w| w / (wsum + cfg.eps)).collect();
    (-log1m.exp_m1(), probs)
}

/// Gradients of a scalar objective w.r.t. every Gaussian parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Tangent to the unit sphere at each normalized rotation.
    pub rotations: Vec<f64>,
    pub opacities: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Reverse pass of [`splat_forward`] given upstream gradients on occupancy
/// (`N`) and, optionally, class probabilities (`N × C`). Each Gaussian
/// reduces over its own cull box, so work splits without write conflicts.
pub fn splat_backward(
    gaussians: &GaussianArrays,
    spec: &GridSpec,
    cfg: &SplatConfig,
    forward: &SplatOutput,
    occupancy_grad: &[f64],
    class_probs_grad: Option<&[f64]>,
) -> Result<SplatGrads> {
    gaussians.validate()?;
    let n = spec.num_voxels();
    let c = gaussians.num_classes;
    if occupancy_grad.len() != n || class_probs_grad.is_some_and(|g| g.len() != n * c) {
        return Err(Error::shape("splat_backward", "upstream gradient size does not match the grid"));
    }
    let semantics = class_probs_grad.is_some();
    if semantics && forward.class_probs.is_none() {
        return Err(Error::shape("splat_backward", "class gradient given but forward ran without semantics"));
    }
    let prepared = Prepared::build(gaussians, semantics);
    // Per voxel: Σ_c G_c · p_c, shared by every Gaussian touching it.
    let g_dot_cp: Vec<f64> = match (class_probs_grad, &forward.class_probs) {
        (Some(g), Some(cp)) => g.chunks_exact(c).zip(cp.chunks_exact(c)).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect(),
        _ => Vec::new(),
    };

    struct One {
        mean: [f64; 3],
        scale: [f64; 3],
        rot: [f64; 4],
        opacity: f64,
        logits: Vec<f64>,
    }

    let per: Vec<One> = (0..gaussians.len())
        .into_par_iter()
        .map(|i| {
            let p = &prepared[i];
            let mut gm = [0.0; 3];
            let mut gs = [0.0; 3];
            let mut grot: Mat3 = [[0.0; 3]; 3];
            let mut ga = 0.0;
            let mut gprob = vec![0.0; if semantics { c } else { 0 }];
            if let Some(b) = forward.cull.boxes[i] {
                for z in b.lo[2]..b.hi[2] {
                    for y in b.lo[1]..b.hi[1] {
                        for x in b.lo[0]..b.hi[0] {
                            let v = spec.linear_index([x, y, z]);
                            let center = spec.center_unchecked([x, y, z]);
                            let (g, u) = p.eval(&center);
                            let w = p.opacity * g;
                            let mut gw = 0.0;
                            let galpha = occupancy_grad[v];
                            if galpha != 0.0 && w < MAX_CONTRIBUTION {
                                gw += galpha * (1.0 - forward.occupancy[v]) / (1.0 - w);
                            }
                            if let Some(gcp) = class_probs_grad {
                                let row = &gcp[v * c..(v + 1) * c];
                                let denom = forward.weight_sum[v] + cfg.eps;
                                let dot: f64 = row.iter().zip(&p.probs).map(|(a, b)| a * b).sum();
                                gw += (dot - g_dot_cp[v]) / denom;
                                let scale = w / denom;
                                for (acc, &r) in gprob.iter_mut().zip(row) {
                                    *acc += scale * r;
                                }
                            }
                            if gw == 0.0 {
                                continue;
                            }
                            ga += gw * g;
                            // d maha: w = a·exp(-½ maha)
                            let gmaha = -0.5 * p.opacity * g * gw;
                            let mut gu = [0.0; 3];
                            for k in 0..3 {
                                let is = p.inv_scale[k];
                                gu[k] = gmaha * 2.0 * u[k] * is * is;
                                gs[k] -= gmaha * 2.0 * u[k] * u[k] * is * is * is;
                            }
                            let d = [center[0] - p.mean[0], center[1] - p.mean[1], center[2] - p.mean[2]];
                            let gd = geometry::mat_vec(&p.rot, &gu);
                            for j in 0..3 {
                                gm[j] -= gd[j];
                                for k in 0..3 {
                                    grot[j][k] += gu[k] * d[j];
                                }
                            }
                        }
                    }
                }
            }
            let (q, qn) = gaussians.unit_rotation(i);
            let gq = geometry::quat_to_mat_vjp(&q, &grot).map(|v| v / qn);
            let logits = if semantics {
                let dot: f64 = gprob.iter().zip(&p.probs).map(|(a, b)| a * b).sum();
                p.probs.iter().zip(&gprob).map(|(&pc, &gc)| pc * (gc - dot)).collect()
            } else {
                vec![0.0; c]
            };
            One {
                mean: gm,
                scale: gs,
                rot: gq,
                opacity: ga,
                logits,
            }
        })
        .collect();

    let mut grads = SplatGrads {
        means: Vec::with_capacity(3 * per.len()),
        scales: Vec::with_capacity(3 * per.len()),
        rotations: Vec::with_capacity(4 * per.len()),
        opacities: Vec::with_capacity(per.len()),
        logits: Vec::with_capacity(c * per.len()),
    };
    for o in per {
        grads.means.extend_from_slice(&o.mean);
        grads.scales.extend_from_slice(&o.scale);
        grads.rotations.extend_from_slice(&o.rot);
        grads.opacities.push(o.opacity);
        grads.logits.extend_from_slice(&o.logits);
    }
    Ok(grads)
}
