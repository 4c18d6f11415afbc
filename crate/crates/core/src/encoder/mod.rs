//! Gaussian encoder: reference points around each Gaussian, projection into
//! sensor feature maps, and multi-scale deformable attention.

mod ops;
mod sensor;


use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{mlp_forward, Activation, Bound, Layer, Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::model::SemanticGaussian;
use crate::splat::SplatVars;
use ops::{DeformSampleOp, RefPointsOp, SlotLayout};

pub use sensor::{intrinsics_for_fov, look_extrinsics, FeaturePyramid, Projection, SensorModel, NEAR_PLANE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Reference points per Gaussian (N_R).
    pub num_refs: usize,
    /// Sampling points per reference point and level (S_p).
    pub num_samples: usize,
    /// Pyramid levels attended to (M).
    pub num_levels: usize,
    /// Hidden width of the offset MLP.
    pub offset_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_refs: 4,
            num_samples: 4,
            num_levels: 2,
            offset_hidden: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_refs == 0 || self.num_samples == 0 || self.num_levels == 0 || self.offset_hidden == 0 {
            return Err(Error::Config("encoder counts must all be at least 1".into()));
        }
        Ok(())
    }

    fn layout(&self) -> SlotLayout {
        SlotLayout {
            levels: self.num_levels,
            samples: self.num_samples,
        }
    }

    /// Width of one reference point's block in the attention head output.
    pub fn slot_width(&self) -> usize {
        self.layout().width()
    }
}

/// Learnable weights of one modality's encoder.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub width: usize,
    pub feature_channels: usize,
    /// `D → hidden → 3·N_R`.
    pub offset_mlp: Mlp,
    /// `D → N_R · levels · samples · (Δu, Δv, logit)`.
    pub attention: Layer,
    /// `Cf × D`, no bias.
    pub value_proj: ParamId,
}

impl EncoderParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        width: usize,
        feature_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if width == 0 || feature_channels == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let offset_mlp = Mlp::new(
            store,
            &format!("{name}.offset"),
            &[width, config.offset_hidden, 3 * config.num_refs],
            Activation::Relu,
            Activation::Identity,
            0.5,
            rng,
        );
        let attention = Layer::new(
            store,
            &format!("{name}.attention"),
            width,
            config.num_refs * config.slot_width(),
            true,
            Activation::Identity,
            0.5,
            rng,
        );
        let bound = (6.0 / (feature_channels + width) as f64).sqrt();
        let v: Vec<f64> = (0..feature_channels * width).map(|_| rng.random_range(-bound..=bound)).collect();
        let value_proj = store.add(format!("{name}.value"), Tensor::matrix(feature_channels, width, v)?, true);
        Ok(Self {
            config,
            width,
            feature_channels,
            offset_mlp,
            attention,
            value_proj,
        })
    }

    fn check_pyramids(&self, pyramids: &[FeaturePyramid]) -> Result<()> {
        for p in pyramids {
            if p.channels() != self.feature_channels {
                return Err(Error::shape(
                    "encode_modality",
                    format!("pyramid has {} channels, encoder expects {}", p.channels(), self.feature_channels),
                ));
            }
            if p.num_levels() < self.config.num_levels {
                return Err(Error::shape(
                    "encode_modality",
                    format!("pyramid has {} levels, encoder attends to {}", p.num_levels(), self.config.num_levels),
                ));
            }
        }
        Ok(())
    }
}

fn row_matmul(x: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn attention_row(store: &ParamStore, params: &EncoderParams, q: &[f64]) -> Vec<f64> {
    let mut row = row_matmul(q, store.get(params.attention.weight));
    if let Some(b) = params.attention.bias {
        for (r, bv) in row.iter_mut().zip(store.get(b).data()) {
            *r += bv;
        }
    }
    row
}

/// Offsets `o_i` for one query (the offset MLP output, reshaped `N_R × 3`).
fn offsets_for(store: &ParamStore, params: &EncoderParams, q: &[f64]) -> Result<Vec<f64>> {
    if q.len() != params.width {
        return Err(Error::shape("gen_reference_points", format!("query of length {} for width {}", q.len(), params.width)));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::matrix(1, q.len(), q.to_vec())?);
    let o = mlp_forward(&mut tape, &bound, &params.offset_mlp, x)?;
    Ok(tape.value(o).data().to_vec())
}

/// Offsets `Δm_i = R diag(s) o_i` of one Gaussian's reference points.
pub fn reference_offsets(store: &ParamStore, params: &EncoderParams, g: &SemanticGaussian, q: &[f64]) -> Result<Vec<Vec3>> {
    g.validate()?;
    let o = offsets_for(store, params, q)?;
    let r = g.rotation_matrix();
    Ok(o
        .chunks_exact(3)
        .map(|oi| geometry::mat_vec(&r, &[g.scale[0] * oi[0], g.scale[1] * oi[1], g.scale[2] * oi[2]]))
        .collect())
}

/// World-space reference points `m + Δm_i` of one Gaussian.
pub fn gen_reference_points(store: &ParamStore, params: &EncoderParams, g: &SemanticGaussian, q: &[f64]) -> Result<Vec<Vec3>> {
    Ok(reference_offsets(store, params, g, q)?.iter().map(|d| geometry::add(&g.mean, d)).collect())
}

/// Softmax weights over the `levels · samples` slots of reference point `ref_index`.
pub fn attention_weights(store: &ParamStore, params: &EncoderParams, q: &[f64], ref_index: usize) -> Vec<f64> {
    let sw = params.config.slot_width();
    let row = attention_row(store, params, q);
    ops::slot_weights(&row[ref_index * sw..(ref_index + 1) * sw], params.config.layout().slots())
}

/// Attention for one query at normalized `uv`, using the head slots of
/// reference point `ref_index`. Returns a `D`-vector.
pub fn deformable_attention(
    store: &ParamStore,
    params: &EncoderParams,
    q: &[f64],
    uv: [f64; 2],
    pyramid: &FeaturePyramid,
    ref_index: usize,
) -> Result<Vec<f64>> {
    params.check_pyramids(std::slice::from_ref(pyramid))?;
    if q.len() != params.width || ref_index >= params.config.num_refs {
        return Err(Error::shape("deformable_attention", "query width or reference index out of range"));
    }
    let sw = params.config.slot_width();
    let row = attention_row(store, params, q);
    let mut sampled = vec![0.0; params.feature_channels];
    ops::attend(pyramid, params.config.layout(), &row[ref_index * sw..(ref_index + 1) * sw], uv, &mut sampled);
    Ok(row_matmul(&sampled, store.get(params.value_proj)))
}

/// Encodes all Gaussians against one modality's sensors. Returns `P × D`.
pub fn encode_modality(
    tape: &mut Tape,
    bound: &Bound,
    params: &EncoderParams,
    gaussians: &SplatVars,
    queries: Var,
    pyramids: &[FeaturePyramid],
) -> Result<Var> {
    params.check_pyramids(pyramids)?;
    let p = tape.value(gaussians.means).rows();
    let q = tape.value(queries);
    if q.rank() != 2 || q.rows() != p || q.cols() != params.width {
        return Err(Error::shape("encode_modality", format!("queries {:?} for {p} Gaussians of width {}", q.shape(), params.width)));
    }
    for (v, w) in [(gaussians.means, 3), (gaussians.scales, 3), (gaussians.rotations, 4)] {
        let t = tape.value(v);
        if t.rank() != 2 || t.rows() != p || t.cols() != w {
            return Err(Error::shape("encode_modality", format!("Gaussian tensor {:?}, expected [{p}, {w}]", t.shape())));
        }
    }
    let offsets = mlp_forward(tape, bound, &params.offset_mlp, queries)?;
    let refs_value = ops::ref_points_forward(
        tape.value(gaussians.means),
        tape.value(gaussians.scales),
        tape.value(gaussians.rotations),
        tape.value(offsets),
    );
    let refs = tape.custom(
        &[gaussians.means, gaussians.scales, gaussians.rotations, offsets],
        refs_value,
        Box::new(RefPointsOp),
    );
    let attn = params.attention.forward(tape, bound, queries)?;
    let op = DeformSampleOp {
        pyramids: pyramids.to_vec(),
        layout: params.config.layout(),
        channels: params.feature_channels,
    };
    let sampled_value = op.forward(tape.value(refs), tape.value(attn));
    let sampled = tape.custom(&[refs, attn], sampled_value, Box::new(op));
    tape.matmul(sampled, bound[params.value_proj])
}
