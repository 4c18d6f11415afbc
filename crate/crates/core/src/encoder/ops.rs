//! Fused tape operations of the encoder.

use rayon::prelude::*;

use super::sensor::FeaturePyramid;
use crate::diff::{BilinearTap, CustomOp, Tensor};
use crate::geometry::{self, Mat3};

/// Sampling layout: `levels × samples` slots of `(Δu, Δv, logit)`, offsets in
/// pixels of the slot's level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct SlotLayout {
    pub levels: usize,
    pub samples: usize,
}

impl SlotLayout {
    pub fn slots(&self) -> usize {
        self.levels * self.samples
    }

    pub fn width(&self) -> usize {
        3 * self.slots()
    }
}

pub(crate) fn slot_weights(slots: &[f64], n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|k| slots[3 * k + 2]).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn tap_for(pyr: &FeaturePyramid, layout: SlotLayout, slots: &[f64], uv: [f64; 2], k: usize) -> (usize, BilinearTap, usize, usize) {
    let l = k / layout.samples;
    let (h, w) = pyr.level_dims(l);
    let u = uv[0] + slots[3 * k] / w as f64;
    let v = uv[1] + slots[3 * k + 1] / h as f64;
    (l, BilinearTap::new(u, v, h, w), h, w)
}

/// Accumulates `Σ_k w_k · sample_k` (length `Cf`) into `out`.
pub(crate) fn attend(pyr: &FeaturePyramid, layout: SlotLayout, slots: &[f64], uv: [f64; 2], out: &mut [f64]) {
    let weights = slot_weights(slots, layout.slots());
    for (k, &wk) in weights.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let (l, tap, h, w) = tap_for(pyr, layout, slots, uv, k);
        let data = pyr.levels[l].data();
        for (c, o) in out.iter_mut().enumerate() {
            *o += wk * tap.sample(&data[c * h * w..(c + 1) * h * w], w);
        }
    }
}

/// Reverse of [`attend`]: accumulates into the slot and `uv` gradients.
fn attend_backward(
    pyr: &FeaturePyramid,
    layout: SlotLayout,
    slots: &[f64],
    uv: [f64; 2],
    gout: &[f64],
    gslots: &mut [f64],
    guv: &mut [f64; 2],
) {
    let n = layout.slots();
    let weights = slot_weights(slots, n);
    let mut gw = vec![0.0; n];
    for k in 0..n {
        let (l, tap, h, w) = tap_for(pyr, layout, slots, uv, k);
        let data = pyr.levels[l].data();
        let (mut dot, mut gu, mut gv) = (0.0, 0.0, 0.0);
        for (c, &g) in gout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let plane = &data[c * h * w..(c + 1) * h * w];
            dot += g * tap.sample(plane, w);
            let d = tap.sample_grad_uv(plane, h, w);
            gu += g * d[0];
            gv += g * d[1];
        }
        gw[k] = dot;
        let (gu, gv) = (weights[k] * gu, weights[k] * gv);
        gslots[3 * k] += gu / w as f64;
        gslots[3 * k + 1] += gv / h as f64;
        guv[0] += gu;
        guv[1] += gv;
    }
    let mean: f64 = weights.iter().zip(&gw).map(|(w, g)| w * g).sum();
    for k in 0..n {
        gslots[3 * k + 2] += weights[k] * (gw[k] - mean);
    }
}

/// Reference points `m + R diag(s) o_i` for all Gaussians.
/// Inputs: means `P×3`, scales `P×3`, rotations `P×4`, offsets `P×3N_R`.
pub(crate) struct RefPointsOp;

fn unit_quat(q: &[f64]) -> ([f64; 4], f64) {
    let q = [q[0], q[1], q[2], q[3]];
    let n = geometry::quat_norm(&q);
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

pub(crate) fn ref_points_forward(means: &Tensor, scales: &Tensor, rotations: &Tensor, offsets: &Tensor) -> Tensor {
    let p = means.rows();
    let nr = offsets.cols() / 3;
    let mut out = vec![0.0; p * 3 * nr];
    out.par_chunks_mut(3 * nr).enumerate().for_each(|(i, row)| {
        let r = geometry::quat_to_mat(&unit_quat(rotations.row(i)).0);
        let s = scales.row(i);
        let m = means.row(i);
        let o = offsets.row(i);
        for k in 0..nr {
            let so = [s[0] * o[3 * k], s[1] * o[3 * k + 1], s[2] * o[3 * k + 2]];
            let d = geometry::mat_vec(&r, &so);
            for a in 0..3 {
                row[3 * k + a] = m[a] + d[a];
            }
        }
    });
    Tensor::matrix(p, 3 * nr, out).expect("dims")
}

impl CustomOp for RefPointsOp {
    fn name(&self) -> &'static str {
        "reference_points"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let (scales, rotations, offsets) = (inputs[1], inputs[2], inputs[3]);
        let p = scales.rows();
        let nr = offsets.cols() / 3;
        let rows: Vec<([f64; 3], [f64; 3], [f64; 4], Vec<f64>)> = (0..p)
            .into_par_iter()
            .map(|i| {
                let (q, qn) = unit_quat(rotations.row(i));
                let r = geometry::quat_to_mat(&q);
                let s = scales.row(i);
                let o = offsets.row(i);
                let g = grad_output.row(i);
                let mut gm = [0.0; 3];
                let mut gs = [0.0; 3];
                let mut gr: Mat3 = [[0.0; 3]; 3];
                let mut go = vec![0.0; 3 * nr];
                for k in 0..nr {
                    let gd = [g[3 * k], g[3 * k + 1], g[3 * k + 2]];
                    let so = [s[0] * o[3 * k], s[1] * o[3 * k + 1], s[2] * o[3 * k + 2]];
                    let rt = geometry::mat_t_vec(&r, &gd);
                    for a in 0..3 {
                        gm[a] += gd[a];
                        gs[a] += rt[a] * o[3 * k + a];
                        go[3 * k + a] = rt[a] * s[a];
                        for b in 0..3 {
                            gr[a][b] += gd[a] * so[b];
                        }
                    }
                }
                let gq = geometry::quat_to_mat_vjp(&q, &gr).map(|v| v / qn);
                (gm, gs, gq, go)
            })
            .collect();
        let mut gm = Vec::with_capacity(3 * p);
        let mut gs = Vec::with_capacity(3 * p);
        let mut gq = Vec::with_capacity(4 * p);
        let mut go = Vec::with_capacity(3 * nr * p);
        for (m, s, q, o) in rows {
            gm.extend(m);
            gs.extend(s);
            gq.extend(q);
            go.extend(o);
        }
        let wrap = |t: &Tensor, d: Vec<f64>| Some(Tensor::new(t.shape().to_vec(), d).expect("dims"));
        vec![
            wrap(inputs[0], gm),
            wrap(inputs[1], gs),
            wrap(inputs[2], gq),
            wrap(inputs[3], go),
        ]
    }
}

/// Sums deformable-attention samples over sensors and reference points.
/// Inputs: reference points `P×3N_R`, attention head output
/// `P×N_R·(3·levels·samples)`. Output `P×Cf`.
pub(crate) struct DeformSampleOp {
    pub pyramids: Vec<FeaturePyramid>,
    pub layout: SlotLayout,
    pub channels: usize,
}

impl DeformSampleOp {
    pub fn forward(&self, refs: &Tensor, attn: &Tensor) -> Tensor {
        let p = refs.rows();
        let nr = refs.cols() / 3;
        let cf = self.channels;
        let sw = self.layout.width();
        let mut out = vec![0.0; p * cf];
        out.par_chunks_mut(cf).enumerate().for_each(|(i, row)| {
            let rp = refs.row(i);
            let at = attn.row(i);
            for pyr in &self.pyramids {
                for k in 0..nr {
                    let pt = [rp[3 * k], rp[3 * k + 1], rp[3 * k + 2]];
                    if let Some(uv) = pyr.sensor.project(&pt) {
                        attend(pyr, self.layout, &at[k * sw..(k + 1) * sw], uv, row);
                    }
                }
            }
        });
        Tensor::matrix(p, cf, out).expect("dims")
    }
}

impl CustomOp for DeformSampleOp {
    fn name(&self) -> &'static str {
        "deformable_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let (refs, attn) = (inputs[0], inputs[1]);
        let nr = refs.cols() / 3;
        let sw = self.layout.width();
        let mut grefs = vec![0.0; refs.len()];
        let mut gattn = vec![0.0; attn.len()];
        grefs
            .par_chunks_mut(3 * nr)
            .zip(gattn.par_chunks_mut(nr * sw))
            .enumerate()
            .for_each(|(i, (gr, ga))| {
                let rp = refs.row(i);
                let at = attn.row(i);
                let gout = grad_output.row(i);
                for pyr in &self.pyramids {
                    for k in 0..nr {
                        let pt = [rp[3 * k], rp[3 * k + 1], rp[3 * k + 2]];
                        let Some((uv, jac)) = pyr.sensor.project_with_jacobian(&pt) else {
                            continue;
                        };
                        let mut guv = [0.0; 2];
                        attend_backward(pyr, self.layout, &at[k * sw..(k + 1) * sw], uv, gout, &mut ga[k * sw..(k + 1) * sw], &mut guv);
                        for a in 0..3 {
                            gr[3 * k + a] += guv[0] * jac[0][a] + guv[1] * jac[1][a];
                        }
                    }
                }
            });
        vec![
            Some(Tensor::new(refs.shape().to_vec(), grefs).expect("dims")),
            Some(Tensor::new(attn.shape().to_vec(), gattn).expect("dims")),
        ]
    }
}
