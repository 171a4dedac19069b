//! Hard-mask overlap metrics and evaluation reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinaryMask;

/// Dice of two hard masks; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let denom = pred.count() + gt.count();
    if denom == 0 {
        1.0
    } else {
        2.0 * pred.intersection_count(gt) as f64 / denom as f64
    }
}

/// IoU of two hard masks; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    crate::segmenter::hard_iou(pred, gt)
}

/// Rounds a fraction to a percentage with two decimals.
pub fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub patch_id: String,
    pub split: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    pub mean_dice_pct: f64,
    pub mean_iou_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub config_hash: String,
    pub splits: BTreeMap<String, SplitSummary>,
    pub patches: Vec<PatchScore>,
}

impl EvalReport {
    /// Adds another split's scores to this report.
    pub fn merge(&mut self, other: EvalReport) {
        self.splits.extend(other.splits);
        self.patches.extend(other.patches);
    }
}

/// Scores every predicted mask against the ground truth with the same id.
pub fn eval_masks(
    split: &str,
    predicted: &BTreeMap<String, BinaryMask>,
    gt: &BTreeMap<String, BinaryMask>,
) -> Result<EvalReport> {
    let pred_ids: BTreeSet<&String> = predicted.keys().collect();
    let gt_ids: BTreeSet<&String> = gt.keys().collect();
    if pred_ids != gt_ids {
        return Err(Error::IdMismatch(
            pred_ids
                .symmetric_difference(&gt_ids)
                .map(|s| s.to_string())
                .collect(),
        ));
    }
    let mut patches = Vec::with_capacity(predicted.len());
    for (id, p) in predicted {
        let g = &gt[id];
        if p.dim() != g.dim() {
            return Err(Error::Shape(format!("mask shape mismatch for {id}")));
        }
        patches.push(PatchScore {
            patch_id: id.clone(),
            split: split.to_string(),
            dice: dice(p, g),
            iou: iou(p, g),
        });
    }
    let n = patches.len().max(1) as f64;
    let summary = SplitSummary {
        count: patches.len(),
        mean_dice_pct: percent(patches.iter().map(|s| s.dice).sum::<f64>() / n),
        mean_iou_pct: percent(patches.iter().map(|s| s.iou).sum::<f64>() / n),
    };
    Ok(EvalReport {
        run_id: String::new(),
        config_hash: String::new(),
        splits: BTreeMap::from([(split.to_string(), summary)]),
        patches,
    })
}
