//! Occupancy and semantic IoU metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SemanticGrid;

/// How classes that appear in neither prediction nor ground truth enter mIoU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Skip them.
    #[default]
    ExcludeAbsent,
    /// Average over every non-empty class, absent ones scoring 0.
    AllClasses,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Per-class counts (index 0, the empty class, stays zero) and binary
/// occupied-vs-empty counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub per_class: Vec<Counts>,
    pub binary: Counts,
}

impl ConfusionTable {
    pub fn new(num_classes: usize) -> Self {
        Self {
            per_class: vec![Counts::default(); num_classes],
            binary: Counts::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    fn add_voxel(&mut self, p: usize, g: usize) {
        match (p != 0, g != 0) {
            (true, true) => self.binary.tp += 1,
            (true, false) => self.binary.fp += 1,
            (false, true) => self.binary.fn_ += 1,
            (false, false) => {}
        }
        if p == g {
            if p != 0 {
                self.per_class[p].tp += 1;
            }
        } else {
            if p != 0 {
                self.per_class[p].fp += 1;
            }
            if g != 0 {
                self.per_class[g].fn_ += 1;
            }
        }
    }

    pub fn from_labels(pred: &[u16], gt: &[u16], num_classes: usize) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape("evaluate", format!("{} predicted vs {} ground-truth voxels", pred.len(), gt.len())));
        }
        if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l as usize >= num_classes) {
            return Err(Error::Domain(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(pred
            .par_chunks(4096)
            .zip(gt.par_chunks(4096))
            .fold(
                || Self::new(num_classes),
                |mut t, (p, g)| {
                    for (&a, &b) in p.iter().zip(g) {
                        t.add_voxel(a as usize, b as usize);
                    }
                    t
                },
            )
            .reduce(
                || Self::new(num_classes),
                |mut a, b| {
                    a.merge(&b);
                    a
                },
            ))
    }

    pub fn merge(&mut self, other: &ConfusionTable) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(b);
        }
        self.binary.add(&other.binary);
    }

    /// Binary IoU; 1 when there is nothing occupied in either grid.
    pub fn iou(&self) -> f64 {
        self.binary.iou().unwrap_or(1.0)
    }

    /// IoU of each class (index 0 is always `None`).
    pub fn class_ious(&self) -> Vec<Option<f64>> {
        self.per_class
            .iter()
            .enumerate()
            .map(|(c, k)| if c == 0 { None } else { k.iou() })
            .collect()
    }

    pub fn miou(&self, mode: MiouMode) -> f64 {
        let ious = self.class_ious();
        match mode {
            MiouMode::ExcludeAbsent => {
                let present: Vec<f64> = ious.into_iter().flatten().collect();
                if present.is_empty() {
                    1.0
                } else {
                    present.iter().sum::<f64>() / present.len() as f64
                }
            }
            MiouMode::AllClasses => {
                let n = self.num_classes().saturating_sub(1).max(1);
                ious.into_iter().flatten().sum::<f64>() / n as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub iou: f64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub table: ConfusionTable,
}

impl Evaluation {
    pub fn from_table(table: ConfusionTable, mode: MiouMode) -> Self {
        Self {
            iou: table.iou(),
            miou: table.miou(mode),
            per_class: table.class_ious(),
            table,
        }
    }

    pub fn report(&self, class_names: &[String]) -> MetricsReport {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"));
        MetricsReport {
            iou: self.iou,
            miou: self.miou,
            per_class: (1..self.per_class.len()).map(|c| (name(c), self.per_class[c])).collect(),
            counts: ReportCounts {
                binary: self.table.binary.clone(),
                per_class: (1..self.table.per_class.len())
                    .map(|c| (name(c), self.table.per_class[c].clone()))
                    .collect(),
            },
        }
    }
}

pub fn evaluate(pred: &[u16], gt: &[u16], num_classes: usize, mode: MiouMode) -> Result<Evaluation> {
    Ok(Evaluation::from_table(ConfusionTable::from_labels(pred, gt, num_classes)?, mode))
}

pub fn evaluate_grids(pred: &SemanticGrid, gt: &SemanticGrid, mode: MiouMode) -> Result<Evaluation> {
    if pred.spec != gt.spec {
        return Err(Error::shape("evaluate", "predicted and ground-truth grids differ in geometry"));
    }
    evaluate(&pred.labels, &gt.labels, pred.num_classes.max(gt.num_classes), mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub binary: Counts,
    pub per_class: BTreeMap<String, Counts>,
}

/// Machine-readable metrics document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub miou: f64,
    pub per_class: BTreeMap<String, Option<f64>>,
    pub counts: ReportCounts,
}
