//! Stateless scoring of one completion against explicit ground truth, the
//! request format behind `georef score` and `POST /v1/score`.
//!
//! ```json
//! {"task": "rec",
//!  "completion": "<think>...</think><answer>[1, 2, 3, 4]</answer>",
//!  "ground_truth": {"targets": [{"bbox": [1, 2, 3, 4], "label": "ship"}]},
//!  "weights": {"format": 1.0, "metrics": 1.0}}
//! ```
//!
//! GRES ground truth carries RLE masks and either a synthetic scene (scored
//! with the oracle segmenter) or a `canvas` of `[width, height]` (scored with
//! the box segmenter). A completion that fails to parse is a valid request
//! scoring zero metrics; only malformed requests are errors.

use serde::{Deserialize, Serialize};

use crate::dataset::{ground_truth_from_targets, Target};
use crate::rewards::{reward, BoxSegmenter, RewardBreakdown, RewardConfig, RewardWeights};
use crate::structured_output::{FormatMode, Task};
use crate::toy::{Scene, ToySegmenter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreGroundTruth {
    pub targets: Vec<Target>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<Scene>,
    /// `[width, height]`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canvas: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub task: Task,
    pub completion: String,
    pub ground_truth: ScoreGroundTruth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<RewardWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_mode: Option<FormatMode>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("request is not valid JSON for the score schema: {0}")]
    Schema(String),
    #[error("invalid ground truth: {0}")]
    GroundTruth(String),
    #[error("invalid weights: {0}")]
    Weights(String),
}

impl ScoreError {
    /// Machine-readable reason code.
    pub fn reason(&self) -> &'static str {
        match self {
            ScoreError::Schema(_) => "schema_violation",
            ScoreError::GroundTruth(_) => "invalid_ground_truth",
            ScoreError::Weights(_) => "invalid_weights",
        }
    }
}

pub fn score_request(req: &ScoreRequest) -> Result<RewardBreakdown, ScoreError> {
    let weights = req.weights.unwrap_or_default();
    weights.validate().map_err(|e| ScoreError::Weights(e.to_string()))?;
    let cfg = RewardConfig {
        weights,
        format_mode: req.format_mode.unwrap_or_default(),
    };
    let gt_in = &req.ground_truth;
    let canvas = match (&gt_in.scene, gt_in.canvas) {
        (Some(s), _) => Some((s.width, s.height)),
        (None, Some([w, h])) => Some((w, h)),
        (None, None) => None,
    };
    let gt = ground_truth_from_targets(req.task, &gt_in.targets, canvas).map_err(ScoreError::GroundTruth)?;
    let out = match &gt_in.scene {
        Some(scene) => reward(&req.completion, &gt, &ToySegmenter, scene, &cfg),
        None => reward(&req.completion, &gt, &BoxSegmenter, &(), &cfg),
    };
    out.map_err(|e| ScoreError::GroundTruth(e.to_string()))
}

/// Parses and scores a raw JSON request body.
pub fn score_json(body: &[u8]) -> Result<RewardBreakdown, ScoreError> {
    let req: ScoreRequest = serde_json::from_slice(body).map_err(|e| ScoreError::Schema(e.to_string()))?;
    score_request(&req)
}
