use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::Trainer;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionTable, Evaluation, MetricsReport};
use crate::model::{read_gaussians_binary, read_gaussians_json, SemanticGrid, DEFAULT_CLASS_NAMES};
use crate::refine::predict;
use crate::scenes::SceneBundle;
use crate::splat::{read_grid, splat_forward, write_grid, GaussianArrays, GridFile};

/// What produces the predicted grids.
#[derive(Clone, Debug)]
pub enum EvalSource {
    /// A trained pipeline checkpoint with its run configuration.
    Checkpoint { path: PathBuf, config: RunConfig },
    /// A Gaussian set ("GOCC", or JSON when the extension is `.json`), splatted per scene.
    Gaussians { path: PathBuf, config: RunConfig },
    /// A saved "GVOX" label grid.
    Grid(PathBuf),
    /// Each scene's own ground truth.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Micro-average: metrics of the summed confusion counts.
    pub aggregate: MetricsReport,
    pub scenes: Vec<SceneMetrics>,
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| DEFAULT_CLASS_NAMES.get(c).map_or_else(|| format!("class_{c}"), |s| s.to_string()))
        .collect()
}

pub fn read_label_grid(path: &Path, num_classes: usize) -> Result<SemanticGrid> {
    let file = read_grid(&mut BufReader::new(File::open(path)?))?;
    file.into_label_grid(num_classes)
}

pub fn write_label_grid(path: &Path, grid: &SemanticGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(&mut w, &GridFile::labels(grid))?;
    w.flush()?;
    Ok(())
}

fn same_lattice(a: &SemanticGrid, b: &SemanticGrid) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * (1.0 + x.abs());
    a.spec.dims == b.spec.dims
        && close(a.spec.voxel_size, b.spec.voxel_size)
        && (0..3).all(|k| close(a.spec.min_corner[k], b.spec.min_corner[k]))
}

/// Predicted grid per scene.
pub fn predict_grids(source: &EvalSource, scenes: &[(String, SceneBundle)]) -> Result<Vec<SemanticGrid>> {
    let c = scenes.first().map_or(0, |(_, b)| b.gt.num_classes);
    match source {
        EvalSource::GroundTruth => Ok(scenes.iter().map(|(_, b)| b.gt.clone()).collect()),
        EvalSource::Grid(path) => {
            let grid = read_label_grid(path, c)?;
            Ok(scenes.iter().map(|_| grid.clone()).collect())
        }
        EvalSource::Gaussians { path, config } => {
            let r = BufReader::new(File::open(path)?);
            let set = if path.extension().is_some_and(|e| e == "json") {
                read_gaussians_json(r)?
            } else {
                read_gaussians_binary(&mut { r })?
            };
            let arrays = GaussianArrays::from_set(&set);
            let cfg = &config.pipeline.splat;
            scenes
                .par_iter()
                .map(|(_, b)| Ok(splat_forward(&arrays, &b.gt.spec, cfg, true)?.into_grid(b.gt.spec, set.num_classes(), cfg.occupancy_threshold)))
                .collect()
        }
        EvalSource::Checkpoint { path, config } => {
            let grid = scenes.first().ok_or_else(|| Error::Config("no scenes to evaluate".into()))?.1.gt.spec;
            let mut t = Trainer::new(config.clone(), grid)?;
            t.load_checkpoint(path)?;
            scenes
                .par_iter()
                .map(|(_, b)| {
                    let (_, grids) = predict(&t.model, &b.inputs())?;
                    Ok(grids.into_iter().last().expect("at least one block"))
                })
                .collect()
        }
    }
}

/// Per-scene and micro-averaged metrics of `preds` against the scenes' ground truth.
pub fn evaluate_predictions(preds: &[SemanticGrid], scenes: &[(String, SceneBundle)], config: &RunConfig) -> Result<EvalReport> {
    if preds.len() != scenes.len() {
        return Err(Error::Config(format!("{} predictions for {} scenes", preds.len(), scenes.len())));
    }
    let c = scenes.iter().map(|(_, b)| b.gt.num_classes).max().unwrap_or(2);
    let names = class_names(c);
    let mut total = ConfusionTable::new(c);
    let mut per_scene = Vec::new();
    for (pred, (name, b)) in preds.iter().zip(scenes) {
        if !same_lattice(pred, &b.gt) {
            return Err(Error::Config(format!("prediction for {name} does not match its grid")));
        }
        let t = ConfusionTable::from_labels(&pred.labels, &b.gt.labels, c)?;
        total.merge(&t);
        per_scene.push(SceneMetrics {
            scene: name.clone(),
            metrics: Evaluation::from_table(t, config.miou_mode).report(&names),
        });
    }
    Ok(EvalReport {
        aggregate: Evaluation::from_table(total, config.miou_mode).report(&names),
        scenes: per_scene,
    })
}

pub const METRICS_FILE: &str = "metrics.json";

/// Evaluates `source` on `scenes`, writing `metrics.json` and every
/// predicted grid (`grids/<scene>.gvox`) under `out`.
pub fn eval(source: &EvalSource, scenes: &[(String, SceneBundle)], config: &RunConfig, out: &Path) -> Result<EvalReport> {
    let preds = predict_grids(source, scenes)?;
    let report = evaluate_predictions(&preds, scenes, config)?;
    fs::create_dir_all(out.join("grids"))?;
    for (p, (name, _)) in preds.iter().zip(scenes) {
        write_label_grid(&out.join("grids").join(format!("{name}.gvox")), p)?;
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out.join(METRICS_FILE), text)?;
    Ok(report)
}
