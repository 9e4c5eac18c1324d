//! COCO-style mean average precision for score-free structured predictions.
//!
//! Predictions carry no confidences, so each one gets a pseudo-confidence from
//! its emission order: the k-th box of an image ranks k. Detections with equal
//! rank form one tie group and the precision/recall curve is sampled only at
//! tie-group boundaries, which makes the result independent of image order.
//! Within an image, detections are greedily matched in rank order to the
//! unmatched same-label ground truth with the highest IoU at or above the
//! threshold. AP is 101-point interpolated precision; mAP averages over the
//! categories that have ground truth and over the IoU thresholds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geometry::box_iou;
use crate::structured_output::OvdItem;

use super::EvalError;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Recall sample points 0.00, 0.01, ..., 1.00.
pub fn recall_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Lowercase, trimmed, inner whitespace collapsed.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// AP per category, averaged over the IoU thresholds.
    pub per_category: BTreeMap<String, f64>,
}

/// Per image, the match flag of each detection in emission order.
fn match_image(dets: &[&OvdItem], gts: &[&OvdItem], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = box_iou(&d.bbox, &gt.bbox);
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    // points: (recall, precision) at each tie-group boundary.
    let grid = recall_grid();
    let total: f64 = grid
        .iter()
        .map(|&r| {
            points
                .iter()
                .filter(|(rc, _)| *rc >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    total / grid.len() as f64
}

fn category_ap(
    preds: &[Vec<&OvdItem>],
    gts: &[Vec<&OvdItem>],
    thr: f64,
) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    // tp flags grouped by rank.
    let mut by_rank: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (dets, gt) in preds.iter().zip(gts) {
        for (rank, hit) in match_image(dets, gt, thr).into_iter().enumerate() {
            let slot = by_rank.entry(rank).or_default();
            if hit {
                slot.0 += 1;
            } else {
                slot.1 += 1;
            }
        }
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let points: Vec<(f64, f64)> = by_rank
        .values()
        .map(|&(t, f)| {
            tp += t;
            fp += f;
            (tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    interpolated_ap(&points)
}

fn of_category<'a>(items: &'a [OvdItem], cat: &str) -> Vec<&'a OvdItem> {
    items.iter().filter(|it| normalize_label(&it.label) == cat).collect()
}

/// Dataset-level mAP. `predictions[i]` and `ground_truths[i]` belong to image `i`.
///
/// With no ground truth in any category the result is 1 when there are also
/// no predictions and 0 otherwise.
pub fn coco_map(
    predictions: &[Vec<OvdItem>],
    ground_truths: &[Vec<OvdItem>],
    thresholds: &[f64],
) -> Result<MapReport, EvalError> {
    if predictions.len() != ground_truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            ground_truths: ground_truths.len(),
        });
    }
    if thresholds.is_empty() {
        return Err(EvalError::Empty("IoU thresholds"));
    }
    let categories: BTreeSet<String> = ground_truths
        .iter()
        .flatten()
        .map(|g| normalize_label(&g.label))
        .collect();
    if categories.is_empty() {
        let any_pred = predictions.iter().any(|p| !p.is_empty());
        return Ok(MapReport {
            map: if any_pred { 0.0 } else { 1.0 },
            per_category: BTreeMap::new(),
        });
    }
    let mut per_category = BTreeMap::new();
    for cat in &categories {
        let preds: Vec<Vec<&OvdItem>> = predictions.iter().map(|p| of_category(p, cat)).collect();
        let gts: Vec<Vec<&OvdItem>> = ground_truths.iter().map(|g| of_category(g, cat)).collect();
        let ap = thresholds
            .iter()
            .map(|&t| category_ap(&preds, &gts, t))
            .sum::<f64>()
            / thresholds.len() as f64;
        per_category.insert(cat.clone(), ap);
    }
    let map = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(MapReport { map, per_category })
}

/// Single-image mAP over the COCO thresholds.
pub fn single_image_map(predictions: &[OvdItem], ground_truth: &[OvdItem]) -> f64 {
    coco_map(
        &[predictions.to_vec()],
        &[ground_truth.to_vec()],
        &coco_iou_thresholds(),
    )
    .map(|r| r.map)
    .unwrap_or(0.0)
}
