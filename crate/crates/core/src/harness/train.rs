use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::diff::{lr_schedule, read_checkpoint, write_checkpoint, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics::{ConfusionTable, Evaluation, MiouMode};
use crate::model::SemanticGrid;
use crate::refine::{predict, run_pipeline, Model, SceneInputs};
use crate::scenes::SceneBundle;

pub const CHECKPOINT_FILE: &str = "checkpoint.gfwt";
pub const LAST_GOOD_FILE: &str = "checkpoint.last_good.gfwt";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.jsonl";
pub const REPORT_FILE: &str = "train_report.json";

/// A scene prepared for the pipeline.
#[derive(Clone, Debug)]
pub struct TrainScene {
    pub inputs: SceneInputs,
    pub gt: SemanticGrid,
}

impl From<&SceneBundle> for TrainScene {
    fn from(b: &SceneBundle) -> Self {
        Self {
            inputs: b.inputs(),
            gt: b.gt.clone(),
        }
    }
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        lr: f64,
        block_losses: Vec<f64>,
        total: f64,
        scenes: Vec<usize>,
    },
    Eval {
        step: u64,
        iou: f64,
        miou: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub step: u64,
    pub iou: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub train_scenes: usize,
    pub held_out_scenes: usize,
    /// Mean loss over the first and last `smoothing_window` steps of this run.
    pub initial_smoothed_loss: Option<f64>,
    pub final_smoothed_loss: Option<f64>,
    /// Held-out metrics before the first update (absent when resuming).
    pub untrained: Option<EvalSummary>,
    pub final_eval: EvalSummary,
    pub losses: Vec<f64>,
}

/// Model, optimizer state and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
    pub config: RunConfig,
}

/// Loss and gradients of one scene.
struct SceneGrad {
    total: f64,
    blocks: Vec<f64>,
    grads: Vec<Tensor>,
}

fn scene_grad(model: &Model, scene: &TrainScene) -> Result<SceneGrad> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, true);
    let trace = run_pipeline(&mut tape, model, &bound, &scene.inputs)?;
    let (loss, blocks) = total_loss(&mut tape, &trace.splats(), &scene.gt.labels)?;
    let total = tape.value(loss).item();
    let blocks = blocks.iter().map(|b| tape.value(b.total).item()).collect();
    if !total.is_finite() {
        return Ok(SceneGrad {
            total,
            blocks,
            grads: Vec::new(),
        });
    }
    tape.backward(loss)?;
    Ok(SceneGrad {
        total,
        blocks,
        grads: bound.grads(&tape),
    })
}

impl Trainer {
    pub fn new(config: RunConfig, grid: crate::model::GridSpec) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.pipeline.clone(), grid)?;
        let adam = AdamState::new(&model.store, config.optimizer.adam);
        Ok(Self {
            model,
            adam,
            step: 0,
            config,
        })
    }

    /// Training scene indices used at `step`: a seeded shuffle per epoch.
    pub fn batch_indices(&self, step: u64, num_train: usize) -> Vec<usize> {
        let b = self.config.train.batch_size;
        let mut cache: Option<(u64, Vec<usize>)> = None;
        (0..b)
            .map(|j| {
                let k = step * b as u64 + j as u64;
                let epoch = k / num_train as u64;
                if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..num_train).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.pipeline.seed);
                    rng.set_stream(epoch + 1);
                    perm.shuffle(&mut rng);
                    cache = Some((epoch, perm));
                }
                cache.as_ref().expect("filled").1[(k % num_train as u64) as usize]
            })
            .collect()
    }

    /// One optimizer step over a batch of training scenes (gradients averaged).
    pub fn train_step(&mut self, train: &[TrainScene]) -> Result<LogRecord> {
        if train.is_empty() {
            return Err(Error::Config("no training scenes".into()));
        }
        let idx = self.batch_indices(self.step, train.len());
        let model = &self.model;
        let step = self.step;
        let results: Vec<SceneGrad> = idx
            .par_iter()
            .map(|&i| scene_grad(model, &train[i]))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::Domain(m) if step > 0 => Error::Numeric(format!("training diverged at step {step}: {m}")),
                e => e,
            })?;
        let n = results.len() as f64;
        let total = results.iter().map(|r| r.total).sum::<f64>() / n;
        let nb = results[0].blocks.len();
        let blocks: Vec<f64> = (0..nb).map(|b| results.iter().map(|r| r.blocks[b]).sum::<f64>() / n).collect();
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total} at step {} (block losses {blocks:?})", self.step)));
        }
        let mut grads = results[0].grads.clone();
        for r in &results[1..] {
            for (g, h) in grads.iter_mut().zip(&r.grads) {
                g.add_assign(h);
            }
        }
        if results.len() > 1 {
            grads.iter_mut().for_each(|g| *g = g.map(|x| x / n));
        }
        let opt = &self.config.optimizer;
        let lr = lr_schedule(self.step, opt.warmup_steps, self.config.train.steps, opt.lr);
        self.adam
            .step(&mut self.model.store, &grads, lr)
            .map_err(|e| Error::Numeric(format!("step {}: {e}", self.step)))?;
        let rec = LogRecord::Step {
            step: self.step,
            lr,
            block_losses: blocks,
            total,
            scenes: idx,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Parameters, Adam moments and step counter as named tensors.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.model.store.named_tensors();
        for (id, (m, v)) in self.model.store.ids().zip(self.adam.first_moment.iter().zip(&self.adam.second_moment)) {
            let name = self.model.store.name(id);
            out.push((format!("adam.m/{name}"), m.clone()));
            out.push((format!("adam.v/{name}"), v.clone()));
        }
        out.push(("adam.step".into(), Tensor::scalar(self.adam.step as f64)));
        out.push(("train.step".into(), Tensor::scalar(self.step as f64)));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &self.checkpoint_tensors())?;
        w.flush()?;
        Ok(())
    }

    /// Restores parameters and, when present, optimizer state from a checkpoint.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let named = read_checkpoint(&mut std::io::BufReader::new(File::open(path)?))?;
        let rest = self.model.store.load_named(named)?;
        let mut table: std::collections::BTreeMap<String, Tensor> = rest.into_iter().collect();
        let ids: Vec<_> = self.model.store.ids().collect();
        if table.contains_key("adam.step") {
            for (k, id) in ids.into_iter().enumerate() {
                let name = self.model.store.name(id).to_string();
                for (prefix, slot) in [("adam.m/", &mut self.adam.first_moment[k]), ("adam.v/", &mut self.adam.second_moment[k])] {
                    let t = table
                        .remove(&format!("{prefix}{name}"))
                        .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{name}")))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::Format(format!("{prefix}{name} has shape {:?}", t.shape())));
                    }
                    *slot = t;
                }
            }
            self.adam.step = table["adam.step"].item() as u64;
        }
        if let Some(t) = table.get("train.step") {
            self.step = t.item() as u64;
        }
        Ok(())
    }
}

/// Micro-averaged held-out evaluation of the last block's prediction.
pub fn evaluate_model(model: &Model, scenes: &[TrainScene], mode: MiouMode) -> Result<(Evaluation, Vec<Evaluation>)> {
    let tables: Vec<ConfusionTable> = scenes
        .par_iter()
        .map(|s| {
            let (_, grids) = predict(model, &s.inputs)?;
            let pred = grids.last().expect("at least one block");
            ConfusionTable::from_labels(&pred.labels, &s.gt.labels, model.config.num_classes)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionTable::new(model.config.num_classes);
    for t in &tables {
        total.merge(t);
    }
    let per_scene = tables.into_iter().map(|t| Evaluation::from_table(t, mode)).collect();
    Ok((Evaluation::from_table(total, mode), per_scene))
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Splits scenes into training and held-out sets (the last `held_out`).
pub fn split_scenes(scenes: &[SceneBundle], held_out: usize) -> Result<(Vec<TrainScene>, Vec<TrainScene>)> {
    if scenes.len() < 2 {
        return Err(Error::Config(format!("training needs at least 2 scenes, got {}", scenes.len())));
    }
    let h = held_out.min(scenes.len() - 1);
    let all: Vec<TrainScene> = scenes.iter().map(TrainScene::from).collect();
    let (a, b) = all.split_at(scenes.len() - h);
    Ok((a.to_vec(), b.to_vec()))
}

pub struct TrainOptions<'a> {
    pub out: &'a Path,
    pub resume: Option<PathBuf>,
}

/// Full training run. Writes the config, a JSON-lines log, periodic and
/// final checkpoints and a report under `opts.out`. On a numeric failure the
/// parameters before the failing step are saved as the last-good checkpoint.
pub fn train(config: &RunConfig, scenes: &[SceneBundle], opts: TrainOptions<'_>) -> Result<TrainReport> {
    config.validate()?;
    let (train_set, held) = split_scenes(scenes, config.train.held_out)?;
    let grid = scenes[0].gt.spec;
    if scenes.iter().any(|s| s.gt.spec != grid) {
        return Err(Error::Config("all scenes must share one grid".into()));
    }
    if scenes[0].gt.num_classes != config.pipeline.num_classes {
        return Err(Error::Config(format!(
            "pipeline.num_classes is {} but scenes use {}",
            config.pipeline.num_classes, scenes[0].gt.num_classes
        )));
    }
    let mut trainer = Trainer::new(config.clone(), grid)?;
    for s in train_set.iter().chain(&held) {
        trainer.model.check_inputs(&s.inputs)?;
    }
    if let Some(path) = &opts.resume {
        trainer.load_checkpoint(path)?;
    }
    fs::create_dir_all(opts.out)?;
    fs::write(opts.out.join(CONFIG_FILE), config.to_toml()?)?;
    let mut log = BufWriter::new(if opts.resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(opts.out.join(LOG_FILE))?
    } else {
        File::create(opts.out.join(LOG_FILE))?
    });
    let emit = |rec: &LogRecord, log: &mut BufWriter<File>| -> Result<()> {
        serde_json::to_writer(&mut *log, rec)?;
        log.write_all(b"\n")?;
        Ok(())
    };
    let mode = config.miou_mode;
    let summary = |t: &Trainer| -> Result<EvalSummary> {
        let (e, _) = evaluate_model(&t.model, &held, mode)?;
        Ok(EvalSummary {
            step: t.step,
            iou: e.iou,
            miou: e.miou,
        })
    };
    let untrained = if trainer.step == 0 {
        let s = summary(&trainer)?;
        emit(&LogRecord::Eval { step: 0, iou: s.iou, miou: s.miou }, &mut log)?;
        Some(s)
    } else {
        None
    };
    let mut losses = Vec::new();
    let tc = &config.train;
    while trainer.step < tc.steps {
        let before = trainer.clone();
        match trainer.train_step(&train_set) {
            Ok(rec) => {
                if let LogRecord::Step { total, .. } = &rec {
                    losses.push(*total);
                }
                emit(&rec, &mut log)?;
            }
            Err(e @ Error::Numeric(_)) => {
                before.save_checkpoint(&opts.out.join(LAST_GOOD_FILE))?;
                log.flush()?;
                return Err(Error::Numeric(format!(
                    "{e}; last good checkpoint written to {}",
                    opts.out.join(LAST_GOOD_FILE).display()
                )));
            }
            Err(e) => return Err(e),
        }
        let s = trainer.step;
        if tc.eval_every > 0 && s % tc.eval_every == 0 && s < tc.steps {
            let e = summary(&trainer)?;
            emit(&LogRecord::Eval { step: s, iou: e.iou, miou: e.miou }, &mut log)?;
        }
        if tc.checkpoint_every > 0 && s % tc.checkpoint_every == 0 {
            trainer.save_checkpoint(&opts.out.join(CHECKPOINT_FILE))?;
        }
    }
    trainer.save_checkpoint(&opts.out.join(CHECKPOINT_FILE))?;
    let final_eval = summary(&trainer)?;
    emit(
        &LogRecord::Eval {
            step: trainer.step,
            iou: final_eval.iou,
            miou: final_eval.miou,
        },
        &mut log,
    )?;
    log.flush()?;
    let w = tc.smoothing_window.min(losses.len());
    let report = TrainReport {
        steps: trainer.step,
        train_scenes: train_set.len(),
        held_out_scenes: held.len(),
        initial_smoothed_loss: mean(&losses[..w]),
        final_smoothed_loss: mean(&losses[losses.len() - w..]),
        untrained,
        final_eval,
        losses,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(opts.out.join(REPORT_FILE), text)?;
    Ok(report)
}
