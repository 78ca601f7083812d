//! Segmentation metrics: per-class and mean IOU over the 21 classes, pixel
//! accuracy, and binary foreground IOU.
//!
//! Aggregation is dataset-level: pixel counts are summed over all images
//! first, then ratios are taken. Accumulators are plain integer matrices, so
//! merging per-worker partials is exact and order-independent.

use crate::imagecore::{BinaryMask, LabelMask, IGNORE, NUM_CLASSES};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction {pw}x{ph} does not match ground truth {gw}x{gh}")]
    DimensionMismatch { pw: u32, ph: u32, gw: u32, gh: u32 },
    #[error("no evaluated pixels: every ground-truth pixel is ignored")]
    NoPixels,
}

/// 21×21 pixel-count matrix; `counts[g][p]` is the number of pixels with
/// ground truth `g` predicted as `p`. Ground-truth ignore pixels are skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self {
            counts: vec![vec![0; NUM_CLASSES]; NUM_CLASSES],
        }
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds the per-pixel (gt, pred) pairs of one image pair.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<(), EvalError> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(EvalError::DimensionMismatch {
                pw: pred.width(),
                ph: pred.height(),
                gw: gt.width(),
                gh: gt.height(),
            });
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE {
                continue;
            }
            // a predicted ignore pixel cannot match any ground-truth class;
            // count it against the prediction as background
            let p = if p == IGNORE { 0 } else { p };
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// Exact merge of two accumulators; summing partials in any order equals
    /// sequential accumulation.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, oc) in row.iter_mut().zip(orow) {
                *c += oc;
            }
        }
    }
}

/// Per-class IOU: TP / (TP + FP + FN). A class with zero denominator never
/// occurs in ground truth or prediction and is reported as `None` (absent).
pub fn iou_per_class(acc: &ConfusionMatrix) -> [Option<f64>; NUM_CLASSES] {
    let mut row_sums = [0u64; NUM_CLASSES];
    let mut col_sums = [0u64; NUM_CLASSES];
    for g in 0..NUM_CLASSES {
        for p in 0..NUM_CLASSES {
            row_sums[g] += acc.counts[g][p];
            col_sums[p] += acc.counts[g][p];
        }
    }
    let mut out = [None; NUM_CLASSES];
    for (c, slot) in out.iter_mut().enumerate() {
        let tp = acc.counts[c][c];
        // row sum = TP + FN, column sum = TP + FP
        let denom = row_sums[c] + col_sums[c] - tp;
        if denom > 0 {
            *slot = Some(tp as f64 / denom as f64);
        }
    }
    out
}

/// Mean IOU over the classes present in ground truth or prediction.
pub fn mean_iou(acc: &ConfusionMatrix) -> Result<f64, EvalError> {
    let ious = iou_per_class(acc);
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(EvalError::NoPixels);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Fraction of evaluated pixels predicted with the correct class.
pub fn pixel_accuracy(acc: &ConfusionMatrix) -> Result<f64, EvalError> {
    let total = acc.total();
    if total == 0 {
        return Err(EvalError::NoPixels);
    }
    let correct: u64 = (0..NUM_CLASSES).map(|c| acc.counts[c][c]).sum();
    Ok(correct as f64 / total as f64)
}

/// Foreground IOU of two binary masks; two empty masks count as a perfect
/// match by convention.
pub fn binary_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, EvalError> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(EvalError::DimensionMismatch {
            pw: pred.width(),
            ph: pred.height(),
            gw: gt.width(),
            gh: gt.height(),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        if p != 0 && g != 0 {
            inter += 1;
        }
        if p != 0 || g != 0 {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Full evaluation summary, serialized as `eval.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-class IOU; `null` marks classes absent from both gt and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub present_classes: Vec<u8>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_confusion(acc: &ConfusionMatrix) -> Result<Self, EvalError> {
        let ious = iou_per_class(acc);
        Ok(Self {
            per_class_iou: ious.to_vec(),
            mean_iou: mean_iou(acc)?,
            pixel_accuracy: pixel_accuracy(acc)?,
            present_classes: ious
                .iter()
                .enumerate()
                .filter_map(|(c, i)| i.map(|_| c as u8))
                .collect(),
            confusion: acc.counts.clone(),
        })
    }
}
