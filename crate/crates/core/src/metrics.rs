//! Confusion-matrix segmentation scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, IGNORE_LABEL};

/// `counts[t * k + p]`: pixels with truth `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument(
                "confusion matrix needs at least one class".into(),
            ));
        }
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if num_classes == 0 || counts.len() != num_classes * num_classes {
            return Err(Error::LengthMismatch {
                shape: vec![num_classes, num_classes],
                expected: num_classes * num_classes,
                actual: counts.len(),
            });
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose truth label is not the ignore id.
    pub fn accumulate(&mut self, pred: &LabelGrid, truth: &LabelGrid) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::GeometryMismatch(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        self.accumulate_labels(pred.labels(), truth.labels())
    }

    pub fn accumulate_labels(&mut self, pred: &[u32], truth: &[u32]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::GeometryMismatch(format!(
                "{} predicted labels vs {} truth labels",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.num_classes;
        let check = |index: usize, label: u32| {
            if label as usize >= k {
                Err(Error::LabelOutOfRange {
                    index,
                    label,
                    num_classes: k,
                })
            } else {
                Ok(label as usize)
            }
        };
        // Validate first so a bad label leaves the matrix untouched.
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if t != IGNORE_LABEL {
                check(i, t)?;
                check(i, p)?;
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != IGNORE_LABEL {
                self.counts[t as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::GeometryMismatch(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn finalize(&self) -> Result<EvalReport> {
        finalize(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub classes_ignored: Vec<usize>,
}

pub fn finalize(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix has no pixels"));
    }
    let k = cm.num_classes;
    let mut per_class_iou = Vec::with_capacity(k);
    let mut classes_ignored = Vec::new();
    let mut diag = 0u64;
    for c in 0..k {
        let tp = cm.get(c, c);
        diag += tp;
        let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let col: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        if row + col == 0 {
            classes_ignored.push(c);
            per_class_iou.push(None);
        } else {
            per_class_iou.push(Some(tp as f64 / (row + col - tp) as f64));
        }
    }
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalReport {
        per_class_iou,
        miou,
        pixel_accuracy: diag as f64 / total as f64,
        classes_ignored,
    })
}
