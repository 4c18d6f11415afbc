use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::diff::{lr_schedule, AdamState, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::losses::block_loss;
use crate::metrics::{evaluate_grids, Evaluation};
use crate::model::{GaussianSet, SemanticGrid};
use crate::refine::{init_gaussians, set_from_tape, splat_tensor_to_grid, InitMode, LearnableInit, PipelineConfig};
use crate::scenes::SceneBundle;
use crate::splat::splat_on_tape;

/// One line of the fit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub lovasz: f64,
    pub bce: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub set: GaussianSet,
    pub grid: SemanticGrid,
    pub evaluation: Evaluation,
    /// Loss of the initialization (the step-0 record).
    pub initial_loss: f64,
    /// Loss of the returned set.
    pub final_loss: f64,
    pub records: Vec<FitRecord>,
}

/// Point-initialized Gaussians for direct fitting of `bundle`.
pub fn fit_init(bundle: &SceneBundle, cfg: &RunConfig) -> Result<GaussianSet> {
    let f = &cfg.fit;
    let pc = PipelineConfig {
        gaussian_count: f.gaussians,
        width: 1,
        num_classes: bundle.gt.num_classes,
        init: InitMode::Points,
        seed: cfg.pipeline.seed,
        init_scale_range: [f.init_scale, f.init_scale],
        init_opacity: f.init_opacity,
        query_std: 0.0,
        ..PipelineConfig::default()
    };
    init_gaussians(&pc, &bundle.gt.spec, Some(&bundle.points))
}

struct Evaluated {
    loss: f64,
    lovasz: f64,
    bce: f64,
    set: GaussianSet,
    grid: SemanticGrid,
}

/// Loss, set and predicted grid at the store's current values; runs the
/// reverse pass when `grads` is given.
fn evaluate_store(
    store: &ParamStore,
    leaves: &LearnableInit,
    bundle: &SceneBundle,
    cfg: &RunConfig,
    grads: Option<&mut Vec<crate::diff::Tensor>>,
) -> Result<Evaluated> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, grads.is_some());
    let (vars, q) = leaves.on_tape(&mut tape, &bound)?;
    let splat = splat_on_tape(&mut tape, &vars, &bundle.gt.spec, &cfg.pipeline.splat)?;
    let loss = block_loss(&mut tape, splat, &bundle.gt.labels)?;
    let value = tape.value(loss.total).item();
    let out = Evaluated {
        loss: value,
        lovasz: tape.value(loss.lovasz).item(),
        bce: tape.value(loss.bce).item(),
        set: set_from_tape(&tape, &vars, q)?,
        grid: splat_tensor_to_grid(tape.value(splat), bundle.gt.spec, cfg.pipeline.splat.occupancy_threshold)?,
    };
    if let Some(g) = grads {
        if value.is_finite() {
            tape.backward(loss.total)?;
            *g = bound.grads(&tape);
        }
    }
    Ok(out)
}

/// After the first update, domain errors (e.g. scales overflowing) mean the
/// optimization diverged.
fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::Domain(m) if step > 0 => Error::Numeric(format!("fit diverged at step {step}: {m}")),
        e => e,
    }
}

/// Optimizes Gaussians directly against `bundle.gt` with Adam. Each step's
/// record is written to `log` as a JSON line.
pub fn fit_scene(bundle: &SceneBundle, cfg: &RunConfig, mut log: Option<&mut dyn Write>) -> Result<FitOutcome> {
    cfg.validate()?;
    let init = fit_init(bundle, cfg)?;
    let mut store = ParamStore::new();
    let leaves = LearnableInit::register(&mut store, &init);
    let opt = &cfg.fit.optimizer;
    let mut adam = AdamState::new(&store, opt.adam);
    let steps = cfg.fit.steps;
    let mut records = Vec::with_capacity(steps as usize);
    let mut grads = Vec::new();
    for step in 0..steps {
        let lr = lr_schedule(step, opt.warmup_steps, steps, opt.lr);
        let e = evaluate_store(&store, &leaves, bundle, cfg, Some(&mut grads)).map_err(|e| diverged(step, e))?;
        if !e.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "fit diverged at step {step}: loss {} (lovasz {}, bce {}), lr {lr}",
                e.loss, e.lovasz, e.bce
            )));
        }
        let rec = FitRecord {
            step,
            lr,
            loss: e.loss,
            lovasz: e.lovasz,
            bce: e.bce,
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut **w, &rec)?;
            w.write_all(b"\n")?;
        }
        records.push(rec);
        adam.step(&mut store, &grads, lr)
            .map_err(|e| Error::Numeric(format!("fit step {step}: {e}")))?;
    }
    let last = evaluate_store(&store, &leaves, bundle, cfg, None).map_err(|e| diverged(steps, e))?;
    if !last.loss.is_finite() {
        return Err(Error::Numeric(format!("fit ended with non-finite loss {}", last.loss)));
    }
    let evaluation = evaluate_grids(&last.grid, &bundle.gt, cfg.miou_mode)?;
    Ok(FitOutcome {
        initial_loss: records.first().map_or(last.loss, |r| r.loss),
        final_loss: last.loss,
        set: last.set,
        grid: last.grid,
        evaluation,
        records,
    })
}

/// Loss of a Gaussian set against `bundle.gt` without optimizing.
pub fn fit_objective(set: &GaussianSet, bundle: &SceneBundle, cfg: &RunConfig) -> Result<f64> {
    let mut store = ParamStore::new();
    let leaves = LearnableInit::register(&mut store, set);
    Ok(evaluate_store(&store, &leaves, bundle, cfg, None)?.loss)
}
