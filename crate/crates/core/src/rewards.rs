//! Verifiable rewards: a binary format reward plus a task metrics reward in
//! `[0, 1]`, combined as a weighted sum.

use serde::{Deserialize, Serialize};

use crate::evalkit::map::single_image_map;
use crate::geometry::{box_iou, mask_iou, mask_union, rasterize_box, trim_mask_to_box, BBox, BinaryMask, GeometryError, Keypoint};
use crate::structured_output::{extract_tagged, format_reward, parse_answer, FormatMode, OvdItem, ParsedAnswer, Task};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("reward weights must be non-negative and finite (format {format}, metrics {metrics})")]
    InvalidWeights { format: f64, metrics: f64 },
    #[error("ground truth is for task {got}, expected {expected}")]
    WrongTask { expected: Task, got: Task },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub format: f64,
    pub metrics: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            format: 1.0,
            metrics: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if ok(self.format) && ok(self.metrics) {
            Ok(())
        } else {
            Err(RewardError::InvalidWeights {
                format: self.format,
                metrics: self.metrics,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default)]
    pub weights: RewardWeights,
    #[serde(default)]
    pub format_mode: FormatMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub metrics: f64,
    pub total: f64,
    pub weight_format: f64,
    pub weight_metrics: f64,
}

/// Weighted sum of the two reward parts.
pub fn combine(format: u8, metrics: f64, weights: &RewardWeights) -> Result<f64, RewardError> {
    weights.validate()?;
    Ok(weights.format * f64::from(format) + weights.metrics * metrics)
}

fn breakdown(format: u8, metrics: f64, cfg: &RewardConfig) -> Result<RewardBreakdown, RewardError> {
    Ok(RewardBreakdown {
        format,
        metrics,
        total: combine(format, metrics, &cfg.weights)?,
        weight_format: cfg.weights.format,
        weight_metrics: cfg.weights.metrics,
    })
}

/// Ground-truth targets for one example.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Rec { bbox: BBox },
    Ovd { items: Vec<OvdItem> },
    Gres { masks: Vec<BinaryMask>, width: usize, height: usize },
}

impl GroundTruth {
    pub fn task(&self) -> Task {
        match self {
            GroundTruth::Rec { .. } => Task::Rec,
            GroundTruth::Ovd { .. } => Task::Ovd,
            GroundTruth::Gres { .. } => Task::Gres,
        }
    }

    pub fn n_gt(&self) -> usize {
        match self {
            GroundTruth::Rec { .. } => 1,
            GroundTruth::Ovd { items } => items.len(),
            GroundTruth::Gres { masks, .. } => masks.len(),
        }
    }

    fn expect(&self, task: Task) -> Result<(), RewardError> {
        if self.task() == task {
            Ok(())
        } else {
            Err(RewardError::WrongTask {
                expected: task,
                got: self.task(),
            })
        }
    }
}

/// Box-and-keypoint prompted segmentation. Implementations must be
/// deterministic and return masks on the requested canvas.
pub trait Segmenter {
    type Scene: ?Sized;

    fn segment(
        &self,
        scene: &Self::Scene,
        bbox: &BBox,
        keypoint1: &Keypoint,
        keypoint2: &Keypoint,
        width: usize,
        height: usize,
    ) -> BinaryMask;
}

/// Segmenter that returns the rasterized prompt box.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxSegmenter;

impl Segmenter for BoxSegmenter {
    type Scene = ();

    fn segment(&self, _: &(), bbox: &BBox, _: &Keypoint, _: &Keypoint, width: usize, height: usize) -> BinaryMask {
        rasterize_box(bbox, width, height)
    }
}

/// Overlength penalty `min(1, sqrt(n_gt / n))`; 1 when nothing is predicted.
pub fn ovd_length_penalty(n_gt: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    (n_gt as f64 / n as f64).sqrt().min(1.0)
}

pub fn rec_metrics(pred: &BBox, gt: &BBox) -> f64 {
    box_iou(pred, gt)
}

pub fn ovd_metrics(pred: &[OvdItem], gt: &[OvdItem]) -> f64 {
    if pred.is_empty() {
        return if gt.is_empty() { 1.0 } else { 0.0 };
    }
    ovd_length_penalty(gt.len(), pred.len()) * single_image_map(pred, gt)
}

/// Mask IoU between the union of trimmed predicted masks and the union of
/// the ground-truth masks.
pub fn gres_metrics<S: Segmenter>(
    items: &[crate::structured_output::GresItem],
    gt_masks: &[BinaryMask],
    width: usize,
    height: usize,
    seg: &S,
    scene: &S::Scene,
) -> Result<f64, RewardError> {
    let predicted: Vec<BinaryMask> = items
        .iter()
        .map(|it| {
            let raw = seg.segment(scene, &it.bbox, &it.keypoint1, &it.keypoint2, width, height);
            trim_mask_to_box(&raw, &it.bbox)
        })
        .collect();
    let pred = mask_union(&predicted, width, height)?;
    let gt = mask_union(gt_masks, width, height)?;
    Ok(mask_iou(&pred, &gt)?)
}

/// Metrics reward for an already parsed answer. A task mismatch between
/// answer and ground truth scores zero.
pub fn answer_metrics<S: Segmenter>(
    answer: &ParsedAnswer,
    gt: &GroundTruth,
    seg: &S,
    scene: &S::Scene,
) -> Result<f64, RewardError> {
    Ok(match (answer, gt) {
        (ParsedAnswer::Rec(b), GroundTruth::Rec { bbox }) => rec_metrics(b, bbox),
        (ParsedAnswer::Ovd { items, .. }, GroundTruth::Ovd { items: gt_items }) => {
            ovd_metrics(items, gt_items)
        }
        (ParsedAnswer::Gres { items, .. }, GroundTruth::Gres { masks, width, height }) => {
            gres_metrics(items, masks, *width, *height, seg, scene)?
        }
        _ => 0.0,
    })
}

fn score<S: Segmenter>(
    completion: &str,
    gt: &GroundTruth,
    seg: &S,
    scene: &S::Scene,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let task = gt.task();
    let format = format_reward(completion, task, cfg.format_mode);
    let resp = extract_tagged(completion);
    let metrics = match parse_answer(task, &resp.answer) {
        Ok(answer) if resp.well_formed => answer_metrics(&answer, gt, seg, scene)?,
        _ => 0.0,
    };
    breakdown(format, metrics, cfg)
}

pub fn reward_rec(completion: &str, gt: &GroundTruth, cfg: &RewardConfig) -> Result<RewardBreakdown, RewardError> {
    gt.expect(Task::Rec)?;
    score(completion, gt, &BoxSegmenter, &(), cfg)
}

pub fn reward_ovd(completion: &str, gt: &GroundTruth, cfg: &RewardConfig) -> Result<RewardBreakdown, RewardError> {
    gt.expect(Task::Ovd)?;
    score(completion, gt, &BoxSegmenter, &(), cfg)
}

pub fn reward_gres<S: Segmenter>(
    completion: &str,
    gt: &GroundTruth,
    seg: &S,
    scene: &S::Scene,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    gt.expect(Task::Gres)?;
    score(completion, gt, seg, scene, cfg)
}

/// Dispatches on the ground-truth task.
pub fn reward<S: Segmenter>(
    completion: &str,
    gt: &GroundTruth,
    seg: &S,
    scene: &S::Scene,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    score(completion, gt, seg, scene, cfg)
}
