//! Per-Gaussian multi-modal fusion: concatenated modality features through
//! the fuser MLP, plus submanifold sparse-convolution context over the
//! voxelized Gaussian means.


use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use crate::diff::{mlp_forward, Activation, Bound, CustomOp, Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const DEFAULT_FUSION_VOXEL_SIZE: f64 = 2.0;

/// Number of taps of the 3×3×3 kernel.
pub const KERNEL_TAPS: usize = 27;

/// Kernel tap index of a neighbour offset in `{-1, 0, 1}³`.
pub fn tap_index(offset: [i64; 3]) -> usize {
    ((offset[0] + 1) * 9 + (offset[1] + 1) * 3 + (offset[2] + 1)) as usize
}

pub const CENTER_TAP: usize = 13;

/// Occupied fusion cells with one feature row each.
#[derive(Clone, Debug)]
pub struct SparseVoxelSet {
    /// Occupied cells in order of first appearance.
    pub coords: Vec<[i64; 3]>,
    /// Cell index of every Gaussian.
    pub assignment: Vec<usize>,
    /// Gaussians per cell.
    pub counts: Vec<usize>,
    /// `V × D` per-cell features.
    pub features: Tensor,
    index: HashMap<[i64; 3], usize>,
}

impl SparseVoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn lookup(&self, cell: [i64; 3]) -> Option<usize> {
        self.index.get(&cell).copied()
    }

    /// `(tap, neighbour)` pairs of each cell, centre included.
    pub fn neighbours(&self) -> Vec<Vec<(usize, usize)>> {
        neighbour_table(&self.coords, &self.index)
    }
}

fn neighbour_table(coords: &[[i64; 3]], index: &HashMap<[i64; 3], usize>) -> Vec<Vec<(usize, usize)>> {
    coords
        .iter()
        .map(|c| {
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(&u) = index.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            out.push((tap_index([dx, dy, dz]), u));
                        }
                    }
                }
            }
            out
        })
        .collect()
}

pub fn cell_of(p: &Vec3, voxel_size: f64) -> [i64; 3] {
    p.map(|x| (x / voxel_size).floor() as i64)
}

fn group(means: &[Vec3], voxel_size: f64) -> (Vec<[i64; 3]>, Vec<usize>, Vec<usize>, HashMap<[i64; 3], usize>) {
    let mut index = HashMap::new();
    let mut coords = Vec::new();
    let mut counts = Vec::new();
    let assignment = means
        .iter()
        .map(|m| {
            let c = cell_of(m, voxel_size);
            let v = *index.entry(c).or_insert_with(|| {
                coords.push(c);
                counts.push(0);
                coords.len() - 1
            });
            counts[v] += 1;
            v
        })
        .collect();
    (coords, assignment, counts, index)
}

/// Groups Gaussians by `floor(mean / voxel_size)` and averages `features`
/// (`P × D`) per occupied cell.
pub fn voxelize_means(means: &[Vec3], features: &Tensor, voxel_size: f64) -> Result<SparseVoxelSet> {
    if !(voxel_size > 0.0) {
        return Err(Error::Domain(format!("fusion voxel size must be positive, got {voxel_size}")));
    }
    if features.rank() != 2 || features.rows() != means.len() {
        return Err(Error::shape("voxelize_means", format!("features {:?} for {} means", features.shape(), means.len())));
    }
    let d = features.cols();
    let (coords, assignment, counts, index) = group(means, voxel_size);
    let mut feats = vec![0.0; coords.len() * d];
    for (i, &v) in assignment.iter().enumerate() {
        for (f, x) in feats[v * d..(v + 1) * d].iter_mut().zip(features.row(i)) {
            *f += x;
        }
    }
    for (v, &n) in counts.iter().enumerate() {
        feats[v * d..(v + 1) * d].iter_mut().for_each(|f| *f /= n as f64);
    }
    Ok(SparseVoxelSet {
        features: Tensor::matrix(coords.len(), d, feats)?,
        coords,
        assignment,
        counts,
        index,
    })
}

fn check_kernel(kernel: &Tensor, bias: &Tensor, d: usize) -> Result<()> {
    if kernel.shape() != [KERNEL_TAPS * d, d] || bias.shape() != [d] {
        return Err(Error::shape(
            "sparse_conv3d",
            format!("kernel {:?} / bias {:?} for width {d}", kernel.shape(), bias.shape()),
        ));
    }
    Ok(())
}

/// `out(v) = bias + Σ_taps feat(v + o) K_o` over occupied cells. `kernel` is
/// `27·D × D`, tap `o` occupying rows `o·D .. (o+1)·D`.
fn conv_cells(features: &Tensor, neighbours: &[Vec<(usize, usize)>], kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
    let d = features.cols();
    let kd = kernel.data();
    let mut out = vec![0.0; neighbours.len() * d];
    out.par_chunks_mut(d).zip(neighbours).for_each(|(row, nb)| {
        row.copy_from_slice(bias.data());
        for &(tap, u) in nb {
            for (i, &x) in features.row(u).iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let k = &kd[(tap * d + i) * d..(tap * d + i + 1) * d];
                for (o, &kv) in row.iter_mut().zip(k) {
                    *o += x * kv;
                }
            }
        }
    });
    out
}

/// Submanifold 3³ convolution over the occupied cells; every Gaussian
/// receives its cell's output. Returns `P × D`.
pub fn sparse_conv3d(svs: &SparseVoxelSet, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = svs.features.cols();
    check_kernel(kernel, bias, d)?;
    let cells = conv_cells(&svs.features, &svs.neighbours(), kernel, bias);
    let data = svs.assignment.iter().flat_map(|&v| cells[v * d..(v + 1) * d].to_vec()).collect();
    Tensor::matrix(svs.assignment.len(), d, data)
}

/// Row-wise concatenation of `P × D` modality features in the given order.
pub fn concat_modalities(tape: &mut Tape, features: &[Var]) -> Result<Var> {
    let first = features.first().ok_or_else(|| Error::shape("concat_modalities", "no modality features"))?;
    let shape = tape.value(*first).shape().to_vec();
    for &f in features {
        if tape.value(f).shape() != shape.as_slice() || shape.len() != 2 {
            return Err(Error::shape(
                "concat_modalities",
                format!("{:?} vs {:?}", tape.value(f).shape(), shape),
            ));
        }
    }
    if features.len() == 1 {
        return Ok(*first);
    }
    tape.concat(features, 1)
}

/// Learnable weights of one fusion stage.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub fuser: Mlp,
    /// `27·D × D`.
    pub sc_kernel: ParamId,
    pub sc_bias: ParamId,
    pub voxel_size: f64,
    pub modalities: usize,
    pub width: usize,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, name: &str, modalities: usize, width: usize, voxel_size: f64, rng: &mut impl Rng) -> Result<Self> {
        if modalities == 0 || width == 0 {
            return Err(Error::Config("fusion needs at least one modality and a positive width".into()));
        }
        if !(voxel_size > 0.0) {
            return Err(Error::Config(format!("fusion voxel size must be positive, got {voxel_size}")));
        }
        let fuser = Mlp::new(
            store,
            &format!("{name}.fuser"),
            &[modalities * width, width, width],
            Activation::Relu,
            Activation::Identity,
            1.0,
            rng,
        );
        let bound = (3.0 / (KERNEL_TAPS * width) as f64).sqrt();
        let k = (0..KERNEL_TAPS * width * width).map(|_| rng.random_range(-bound..=bound)).collect();
        let sc_kernel = store.add(format!("{name}.sc.kernel"), Tensor::matrix(KERNEL_TAPS * width, width, k)?, true);
        let sc_bias = store.add(format!("{name}.sc.bias"), Tensor::zeros(vec![width]), false);
        Ok(Self {
            fuser,
            sc_kernel,
            sc_bias,
            voxel_size,
            modalities,
            width,
        })
    }
}

/// Scatter-mean into cells, sparse convolution, gather back to Gaussians.
/// Inputs: features `P×D`, kernel, bias.
struct SparseContextOp {
    assignment: Vec<usize>,
    counts: Vec<usize>,
    neighbours: Vec<Vec<(usize, usize)>>,
}

impl SparseContextOp {
    fn cell_features(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut f = vec![0.0; self.counts.len() * d];
        for (i, &v) in self.assignment.iter().enumerate() {
            let n = self.counts[v] as f64;
            for (a, b) in f[v * d..(v + 1) * d].iter_mut().zip(x.row(i)) {
                *a += b / n;
            }
        }
        Tensor::matrix(self.counts.len(), d, f).expect("dims")
    }

    fn forward(&self, x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let d = x.cols();
        let cells = conv_cells(&self.cell_features(x), &self.neighbours, kernel, bias);
        let data = self.assignment.iter().flat_map(|&v| cells[v * d..(v + 1) * d].to_vec()).collect();
        Tensor::matrix(self.assignment.len(), d, data).expect("dims")
    }
}

impl CustomOp for SparseContextOp {
    fn name(&self) -> &'static str {
        "sparse_context"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let d = x.cols();
        let nv = self.counts.len();
        let feats = self.cell_features(x);
        let mut gy = vec![0.0; nv * d];
        for (i, &v) in self.assignment.iter().enumerate() {
            for (a, b) in gy[v * d..(v + 1) * d].iter_mut().zip(grad_output.row(i)) {
                *a += b;
            }
        }
        let mut gbias = vec![0.0; d];
        for row in gy.chunks_exact(d) {
            gbias.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        // Kernel gradient: Σ_v feat(v+o)ᵀ gY_v, accumulated per tap.
        let kd = kernel.data();
        let gkernel = (0..nv)
            .into_par_iter()
            .fold(
                || vec![0.0; KERNEL_TAPS * d * d],
                |mut acc, v| {
                    let g = &gy[v * d..(v + 1) * d];
                    for &(tap, u) in &self.neighbours[v] {
                        for (i, &f) in feats.row(u).iter().enumerate() {
                            if f == 0.0 {
                                continue;
                            }
                            let dst = &mut acc[(tap * d + i) * d..(tap * d + i + 1) * d];
                            dst.iter_mut().zip(g).for_each(|(a, b)| *a += f * b);
                        }
                    }
                    acc
                },
            )
            .reduce(
                || vec![0.0; KERNEL_TAPS * d * d],
                |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                    a
                },
            );
        // Feature gradient: gF_u = Σ_{(tap, u) ∈ nb(v)} K_tap gY_v.
        let mut gf = vec![0.0; nv * d];
        for v in 0..nv {
            let g = &gy[v * d..(v + 1) * d];
            for &(tap, u) in &self.neighbours[v] {
                for i in 0..d {
                    let k = &kd[(tap * d + i) * d..(tap * d + i + 1) * d];
                    gf[u * d + i] += k.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let mut gx = vec![0.0; x.len()];
        for (i, &v) in self.assignment.iter().enumerate() {
            let n = self.counts[v] as f64;
            for (a, b) in gx[i * d..(i + 1) * d].iter_mut().zip(&gf[v * d..(v + 1) * d]) {
                *a = b / n;
            }
        }
        vec![
            Some(Tensor::new(x.shape().to_vec(), gx).expect("dims")),
            Some(Tensor::new(kernel.shape().to_vec(), gkernel).expect("dims")),
            Some(Tensor::new(vec![d], gbias).expect("dims")),
        ]
    }
}

/// Sparse-convolution context of `features` over cells of `means` on the tape.
pub fn sparse_context(tape: &mut Tape, features: Var, kernel: Var, bias: Var, means: &[Vec3], voxel_size: f64) -> Result<Var> {
    let x = tape.value(features);
    let d = x.cols();
    if x.rank() != 2 || x.rows() != means.len() {
        return Err(Error::shape("sparse_context", format!("features {:?} for {} means", x.shape(), means.len())));
    }
    check_kernel(tape.value(kernel), tape.value(bias), d)?;
    if !(voxel_size > 0.0) {
        return Err(Error::Domain(format!("fusion voxel size must be positive, got {voxel_size}")));
    }
    let (coords, assignment, counts, index) = group(means, voxel_size);
    let neighbours = neighbour_table(&coords, &index);
    let op = SparseContextOp {
        assignment,
        counts,
        neighbours,
    };
    let out = op.forward(x, tape.value(kernel), tape.value(bias));
    Ok(tape.custom(&[features, kernel, bias], out, Box::new(op)))
}

/// `Q = Φ_fusion([F_1 .. F_n]) + SC(voxelized means)`. `means` are the
/// current Gaussian centres (cell assignment carries no gradient).
pub fn fuse(tape: &mut Tape, bound: &Bound, params: &FusionParams, features: &[Var], means: &[Vec3]) -> Result<Var> {
    if features.len() != params.modalities {
        return Err(Error::shape(
            "fuse",
            format!("{} modality features for a {}-modality fuser", features.len(), params.modalities),
        ));
    }
    let cat = concat_modalities(tape, features)?;
    let fused = mlp_forward(tape, bound, &params.fuser, cat)?;
    let ctx = sparse_context(tape, fused, bound[params.sc_kernel], bound[params.sc_bias], means, params.voxel_size)?;
    tape.add(fused, ctx)
}
