//! Splatting as a fused tape operation.

use super::kernel::{splat_backward, splat_forward, GaussianArrays, SplatOutput};
use super::SplatConfig;
use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::GridSpec;

/// Tape variables holding `P` Gaussians: means `P×3`, scales `P×3`,
/// rotations `P×4`, opacities `P×1`, logits `P×C`.
#[derive(Clone, Copy, Debug)]
pub struct SplatVars {
    pub means: Var,
    pub scales: Var,
    pub rotations: Var,
    pub opacities: Var,
    pub logits: Var,
}

impl SplatVars {
    pub fn arrays(&self, tape: &Tape) -> Result<GaussianArrays> {
        arrays_from(&[
            tape.value(self.means),
            tape.value(self.scales),
            tape.value(self.rotations),
            tape.value(self.opacities),
            tape.value(self.logits),
        ])
    }
}

fn arrays_from(t: &[&Tensor]) -> Result<GaussianArrays> {
    let p = t[0].rows();
    let widths = [3, 3, 4, 1];
    for (k, &w) in widths.iter().enumerate() {
        if t[k].rows() != p || t[k].cols() != w {
            return Err(Error::shape("splat", format!("input {k} has shape {:?}, expected [{p}, {w}]", t[k].shape())));
        }
    }
    if t[4].rows() != p {
        return Err(Error::shape("splat", format!("logits {:?} for {p} Gaussians", t[4].shape())));
    }
    Ok(GaussianArrays {
        means: t[0].data().to_vec(),
        scales: t[1].data().to_vec(),
        rotations: t[2].data().to_vec(),
        opacities: t[3].data().to_vec(),
        logits: t[4].data().to_vec(),
        num_classes: t[4].cols(),
    })
}

struct SplatOp {
    spec: GridSpec,
    cfg: SplatConfig,
    forward: SplatOutput,
}

impl CustomOp for SplatOp {
    fn name(&self) -> &'static str {
        "splat"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let g = arrays_from(inputs).expect("validated in forward");
        let c = g.num_classes;
        let stride = c + 1;
        let occ: Vec<f64> = grad_output.data().iter().step_by(stride).copied().collect();
        let probs: Vec<f64> = grad_output
            .data()
            .chunks_exact(stride)
            .flat_map(|row| row[1..].iter().copied())
            .collect();
        let grads = splat_backward(&g, &self.spec, &self.cfg, &self.forward, &occ, Some(&probs)).expect("validated in forward");
        let wrap = |t: &Tensor, data: Vec<f64>| Some(Tensor::new(t.shape().to_vec(), data).expect("same shape"));
        vec![
            wrap(inputs[0], grads.means),
            wrap(inputs[1], grads.scales),
            wrap(inputs[2], grads.rotations),
            wrap(inputs[3], grads.opacities),
            wrap(inputs[4], grads.logits),
        ]
    }
}

/// Splats onto `spec`, giving an `N × (1 + C)` tensor whose first column is
/// occupancy and whose remaining columns are class probabilities.
pub fn splat_on_tape(tape: &mut Tape, vars: &SplatVars, spec: &GridSpec, cfg: &SplatConfig) -> Result<Var> {
    let g = vars.arrays(tape)?;
    let c = g.num_classes;
    let forward = splat_forward(&g, spec, cfg, true)?;
    let probs = forward.class_probs.as_ref().expect("semantics requested");
    let n = spec.num_voxels();
    let mut data = Vec::with_capacity(n * (c + 1));
    for v in 0..n {
        data.push(forward.occupancy[v]);
        data.extend_from_slice(&probs[v * c..(v + 1) * c]);
    }
    let out = Tensor::matrix(n, c + 1, data)?;
    let inputs = [vars.means, vars.scales, vars.rotations, vars.opacities, vars.logits];
    Ok(tape.custom(
        &inputs,
        out,
        Box::new(SplatOp {
            spec: *spec,
            cfg: *cfg,
            forward,
        }),
    ))
}
