//! Confusion matrices and mean intersection-over-union.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::LabelMap;
use crate::error::{CpcError, Result};

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignore_label: Option<u8>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_label: Option<u8>) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignore_label,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one prediction/ground-truth pair. Pixels whose ground truth is the
    /// ignore label are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(CpcError::Shape(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let mut local = vec![0u64; self.counts.len()];
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if Some(g) == self.ignore_label {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(CpcError::InvalidArgument(format!(
                    "label {} out of range for {} classes",
                    p.max(g),
                    self.classes
                )));
            }
            local[g * self.classes + p] += 1;
        }
        for (c, l) in self.counts.iter_mut().zip(local) {
            *c += l;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(CpcError::Shape("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class (`None` when the class never occurs in either map) and
    /// the mean over classes that do occur.
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let n = self.classes;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..n).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(CpcError::InvalidArgument("no class has any pixels".into()));
        }
        Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    /// IoU by class name; classes absent from both maps are omitted.
    pub per_class: BTreeMap<String, f64>,
    /// Ground-truth pixel count by class name.
    pub pixel_counts: BTreeMap<String, u64>,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        if class_names.len() != cm.classes() {
            return Err(CpcError::Shape(format!(
                "{} class names for {} classes",
                class_names.len(),
                cm.classes()
            )));
        }
        let (miou, per) = cm.miou()?;
        let per_class = class_names
            .iter()
            .zip(&per)
            .filter_map(|(n, v)| v.map(|v| (n.clone(), v)))
            .collect();
        let pixel_counts = class_names
            .iter()
            .enumerate()
            .map(|(g, n)| (n.clone(), (0..cm.classes()).map(|p| cm.get(g, p)).sum()))
            .collect();
        Ok(Self {
            miou,
            per_class,
            pixel_counts,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, json + "\n").map_err(|e| CpcError::io(path, e))
    }
}

/// Mean IoU of paired prediction and ground-truth maps.
pub fn evaluate_maps<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
    classes: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes, None);
    for (pred, gt) in pairs {
        cm.accumulate(pred, gt)?;
    }
    Ok(cm)
}
