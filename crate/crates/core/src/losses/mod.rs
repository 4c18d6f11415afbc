//! Training losses: binary cross-entropy on splatted occupancy and
//! Lovász-softmax on the per-voxel class distribution, summed over blocks.

#[cfg(test)]
mod tests;

use rayon::prelude::*;

use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;

fn check_labels(op: &'static str, n: usize, labels: &[u16], num_classes: Option<usize>) -> Result<()> {
    if n == 0 {
        return Err(Error::shape(op, "empty voxel set"));
    }
    if labels.len() != n {
        return Err(Error::shape(op, format!("{} labels for {n} voxels", labels.len())));
    }
    if let Some(c) = num_classes {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Domain(format!("label {bad} out of range for {c} classes")));
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of occupancy `alpha` against `label ≠ 0`.
pub fn bce_value(alpha: &[f64], labels: &[u16]) -> Result<f64> {
    check_labels("bce_occupancy", alpha.len(), labels, None)?;
    let s: f64 = alpha
        .iter()
        .zip(labels)
        .map(|(&a, &l)| if l != 0 { -(a + BCE_EPS).ln() } else { -(1.0 - a + BCE_EPS).ln() })
        .sum();
    Ok(s / alpha.len() as f64)
}

struct BceOp {
    labels: Vec<u16>,
}

impl CustomOp for BceOp {
    fn name(&self) -> &'static str {
        "bce_occupancy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let a = inputs[0];
        let scale = grad_output.item() / a.len() as f64;
        let g = a
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&a, &l)| if l != 0 { -scale / (a + BCE_EPS) } else { scale / (1.0 - a + BCE_EPS) })
            .collect();
        vec![Some(Tensor::new(a.shape().to_vec(), g).expect("dims"))]
    }
}

/// Binary cross-entropy on the tape. `alpha` holds one value per voxel (any shape).
pub fn bce_occupancy(tape: &mut Tape, alpha: Var, labels: &[u16]) -> Result<Var> {
    let v = bce_value(tape.value(alpha).data(), labels)?;
    Ok(tape.custom(
        &[alpha],
        Tensor::scalar(v),
        Box::new(BceOp {
            labels: labels.to_vec(),
        }),
    ))
}

/// Lovász extension of the Jaccard loss for one class: returns the loss and
/// its gradient w.r.t. the per-voxel errors (in voxel order).
fn lovasz_class(errors: &[f64], fg: &[bool]) -> (f64, Vec<f64>) {
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: ties keep ascending voxel order.
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut grad = vec![0.0; n];
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    let mut loss = 0.0;
    for &v in &order {
        if fg[v] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        let g = jaccard - prev;
        prev = jaccard;
        grad[v] = g;
        loss += g * errors[v];
    }
    (loss, grad)
}

/// Per-class Lovász-softmax losses (`None` for classes absent from `labels`)
/// and the gradient of their mean w.r.t. `probs` (`N × C`).
pub fn lovasz_per_class(probs: &Tensor, labels: &[u16]) -> Result<(Vec<Option<f64>>, Tensor)> {
    if probs.rank() != 2 {
        return Err(Error::shape("lovasz_softmax", format!("expected N × C, got {:?}", probs.shape())));
    }
    let (n, c) = (probs.rows(), probs.cols());
    check_labels("lovasz_softmax", n, labels, Some(c))?;
    let per_class: Vec<Option<(f64, Vec<f64>)>> = (0..c)
        .into_par_iter()
        .map(|k| {
            let fg: Vec<bool> = labels.iter().map(|&l| l as usize == k).collect();
            if !fg.iter().any(|&f| f) {
                return None;
            }
            let errors: Vec<f64> = (0..n)
                .map(|v| {
                    let p = probs.data()[v * c + k];
                    if fg[v] {
                        1.0 - p
                    } else {
                        p
                    }
                })
                .collect();
            let (loss, g) = lovasz_class(&errors, &fg);
            Some((loss, g.iter().zip(&fg).map(|(&g, &f)| if f { -g } else { g }).collect()))
        })
        .collect();
    let present = per_class.iter().filter(|x| x.is_some()).count() as f64;
    let mut grad = vec![0.0; n * c];
    for (k, entry) in per_class.iter().enumerate() {
        if let Some((_, g)) = entry {
            for v in 0..n {
                grad[v * c + k] = g[v] / present;
            }
        }
    }
    Ok((
        per_class.into_iter().map(|e| e.map(|(l, _)| l)).collect(),
        Tensor::matrix(n, c, grad)?,
    ))
}

struct LovaszOp {
    grad: Tensor,
}

impl CustomOp for LovaszOp {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad_output.item();
        vec![Some(self.grad.map(|x| g * x))]
    }
}

/// Lovász-softmax over `probs` (`N × C`): mean over classes present in
/// `labels`. The sort is treated as a fixed permutation.
pub fn lovasz_softmax(tape: &mut Tape, probs: Var, labels: &[u16]) -> Result<Var> {
    let (losses, grad) = lovasz_per_class(tape.value(probs), labels)?;
    let present: Vec<f64> = losses.into_iter().flatten().collect();
    let v = present.iter().sum::<f64>() / present.len() as f64;
    Ok(tape.custom(&[probs], Tensor::scalar(v), Box::new(LovaszOp { grad })))
}

/// Turns a splat output row `(α, p_0 .. p_{C-1})` into a voxel class
/// distribution: `q_0 = 1 − α + α p_0`, `q_c = α p_c`.
struct ComposeOp;

fn compose_rows(x: &Tensor) -> Tensor {
    let (n, w) = (x.rows(), x.cols());
    let c = w - 1;
    let mut out = vec![0.0; n * c];
    for (row, o) in x.data().chunks_exact(w).zip(out.chunks_exact_mut(c)) {
        let a = row[0];
        for k in 0..c {
            o[k] = a * row[1 + k];
        }
        o[0] += 1.0 - a;
    }
    Tensor::matrix(n, c, out).expect("dims")
}

impl CustomOp for ComposeOp {
    fn name(&self) -> &'static str {
        "compose_occupancy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, w) = (x.rows(), x.cols());
        let c = w - 1;
        let mut g = vec![0.0; n * w];
        for v in 0..n {
            let row = x.row(v);
            let go = grad_output.row(v);
            let gr = &mut g[v * w..(v + 1) * w];
            gr[0] = -go[0] + (0..c).map(|k| go[k] * row[1 + k]).sum::<f64>();
            for k in 0..c {
                gr[1 + k] = row[0] * go[k];
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), g).expect("dims"))]
    }
}

pub fn compose_class_distribution(tape: &mut Tape, splat: Var) -> Result<Var> {
    let x = tape.value(splat);
    if x.rank() != 2 || x.cols() < 2 {
        return Err(Error::shape("compose_class_distribution", format!("expected N × (1 + C), got {:?}", x.shape())));
    }
    let out = compose_rows(x);
    Ok(tape.custom(&[splat], out, Box::new(ComposeOp)))
}

/// Loss terms of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockLoss {
    pub lovasz: Var,
    pub bce: Var,
    pub total: Var,
}

/// Lovász on the composed class distribution plus BCE on α, for one splat
/// output `N × (1 + C)`.
pub fn block_loss(tape: &mut Tape, splat: Var, labels: &[u16]) -> Result<BlockLoss> {
    let probs = compose_class_distribution(tape, splat)?;
    let lovasz = lovasz_softmax(tape, probs, labels)?;
    let alpha = tape.slice(splat, 1, 0, 1)?;
    let bce = bce_occupancy(tape, alpha, labels)?;
    let total = tape.add(lovasz, bce)?;
    Ok(BlockLoss { lovasz, bce, total })
}

/// Equally weighted sum of every block's loss.
pub fn total_loss(tape: &mut Tape, splats: &[Var], labels: &[u16]) -> Result<(Var, Vec<BlockLoss>)> {
    if splats.is_empty() {
        return Err(Error::shape("total_loss", "no block outputs"));
    }
    let blocks: Vec<BlockLoss> = splats.iter().map(|&s| block_loss(tape, s, labels)).collect::<Result<_>>()?;
    let mut total = blocks[0].total;
    for b in &blocks[1..] {
        total = tape.add(total, b.total)?;
    }
    Ok((total, blocks))
}
