//! Gaussian initialization, the per-block property heads, and the block
//! pipeline.

mod init;
mod pipeline;


use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{mlp_forward, Activation, Bound, Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::GaussianSet;
use crate::splat::SplatVars;

pub use init::{init_gaussians, InitMode, LearnableInit};
pub use pipeline::{predict, run_pipeline, splat_tensor_to_grid, BlockParams, BlockTrace, Modality, Model, PipelineConfig, PipelineTrace, SceneInputs};

/// Raw head outputs per Gaussian besides the class logits.
pub const HEAD_FIXED_OUTPUTS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Per-axis bound of the mean update (meters); `inf` leaves it unbounded.
    pub offset_range: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            offset_range: 2.0,
            scale_min: 0.05,
            scale_max: 20.0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.offset_range > 0.0) {
            return Err(Error::Config(format!("offset_range must be > 0, got {}", self.offset_range)));
        }
        if !(self.scale_min > 0.0 && self.scale_min < self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < scale_min < scale_max, got {} / {}",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

/// Property head of one block: `D → D → 11 + C` raw outputs laid out as
/// mean offset (3), scale (3), rotation (4), opacity (1), logits (C).
#[derive(Clone, Debug)]
pub struct RefineParams {
    pub head: Mlp,
    pub config: RefineConfig,
    pub num_classes: usize,
}

impl RefineParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, num_classes: usize, config: RefineConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if width == 0 || num_classes == 0 {
            return Err(Error::Config("refine head needs a positive width and class count".into()));
        }
        let head = Mlp::new(
            store,
            &format!("{name}.head"),
            &[width, width, HEAD_FIXED_OUTPUTS + num_classes],
            Activation::Relu,
            Activation::Identity,
            0.1,
            rng,
        );
        Ok(Self {
            head,
            config,
            num_classes,
        })
    }

    pub fn out_dim(&self) -> usize {
        HEAD_FIXED_OUTPUTS + self.num_classes
    }
}

/// Decodes new Gaussian properties from `q` (`P × D`): the mean moves by a
/// bounded offset, every other property is replaced.
pub fn refine_step(tape: &mut Tape, bound: &Bound, params: &RefineParams, gaussians: &SplatVars, q: Var) -> Result<SplatVars> {
    let p = tape.value(gaussians.means).rows();
    if tape.value(q).rank() != 2 || tape.value(q).rows() != p {
        return Err(Error::shape("refine_step", format!("queries {:?} for {p} Gaussians", tape.value(q).shape())));
    }
    let raw = mlp_forward(tape, bound, &params.head, q)?;
    let cfg = &params.config;
    let raw_m = tape.slice(raw, 1, 0, 3)?;
    let delta = if cfg.offset_range.is_finite() {
        let t = tape.tanh(raw_m);
        tape.scale(t, cfg.offset_range)
    } else {
        raw_m
    };
    let means = tape.add(gaussians.means, delta)?;
    let raw_s = tape.slice(raw, 1, 3, 6)?;
    let soft = tape.softplus(raw_s);
    let scales = tape.clamp(soft, cfg.scale_min, cfg.scale_max);
    let raw_r = tape.slice(raw, 1, 6, 10)?;
    let rotations = tape.normalize_rows(raw_r)?;
    let raw_a = tape.slice(raw, 1, 10, 11)?;
    let opacities = tape.sigmoid(raw_a);
    let logits = tape.slice(raw, 1, HEAD_FIXED_OUTPUTS, params.out_dim())?;
    Ok(SplatVars {
        means,
        scales,
        rotations,
        opacities,
        logits,
    })
}

/// Tensors `[means, scales, rotations, opacities, logits]` of a set.
pub fn set_tensors(set: &GaussianSet) -> [Tensor; 5] {
    let p = set.len();
    let c = set.num_classes();
    let g = &set.gaussians;
    [
        Tensor::matrix(p, 3, g.iter().flat_map(|g| g.mean).collect()).expect("dims"),
        Tensor::matrix(p, 3, g.iter().flat_map(|g| g.scale).collect()).expect("dims"),
        Tensor::matrix(p, 4, g.iter().flat_map(|g| g.rotation).collect()).expect("dims"),
        Tensor::matrix(p, 1, g.iter().map(|g| g.opacity).collect()).expect("dims"),
        Tensor::matrix(p, c, g.iter().flat_map(|g| g.logits.clone()).collect()).expect("dims"),
    ]
}

/// Tape leaves holding a set's properties.
pub fn set_leaves(tape: &mut Tape, set: &GaussianSet, requires_grad: bool) -> SplatVars {
    let [m, s, r, a, c] = set_tensors(set);
    SplatVars {
        means: tape.leaf(m, requires_grad),
        scales: tape.leaf(s, requires_grad),
        rotations: tape.leaf(r, requires_grad),
        opacities: tape.leaf(a, requires_grad),
        logits: tape.leaf(c, requires_grad),
    }
}

/// Reads tape values back into a [`GaussianSet`] carrying `queries`.
pub fn set_from_tape(tape: &Tape, vars: &SplatVars, queries: Var) -> Result<GaussianSet> {
    let g = vars.arrays(tape)?;
    let q = tape.value(queries);
    GaussianSet::new(g.to_gaussians(), q.data().to_vec(), q.cols())
}

/// Value-level refinement of a set with queries `q` (`P × D`).
pub fn refine_values(store: &ParamStore, params: &RefineParams, set: &GaussianSet, q: &Tensor) -> Result<GaussianSet> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let vars = set_leaves(&mut tape, set, false);
    let qv = tape.constant(q.clone());
    let out = refine_step(&mut tape, &bound, params, &vars, qv)?;
    set_from_tape(&tape, &out, qv)
}
