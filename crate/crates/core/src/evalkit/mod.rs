//! Evaluation protocol: Acc@tau with Unique/Non-Unique splits, COCO-style
//! mAP, dataset gIoU, the nested few-shot sampler and cross-source runs.

pub mod map;
pub mod policy_eval;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::geometry::{box_iou, BBox};
use crate::structured_output::Task;
use crate::toy::rng_for;

pub use map::{coco_iou_thresholds, coco_map, normalize_label, single_image_map, MapReport};
pub use policy_eval::{cross_eval, evaluate_policy, CrossEvalReport, SourceSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {ground_truths} ground truths")]
    LengthMismatch { predictions: usize, ground_truths: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("prediction id {prediction:?} does not match ground truth id {ground_truth:?} at position {index}")]
    IdMismatch {
        index: usize,
        prediction: String,
        ground_truth: String,
    },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("threshold {0} is outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("mixed tasks in evaluation set: {0} and {1}")]
    MixedTasks(Task, Task),
    #[error(transparent)]
    Reward(#[from] crate::rewards::RewardError),
}

/// Metric values for one subset of the evaluation set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub overall: BTreeMap<String, f64>,
    pub unique: SplitMetrics,
    pub non_unique: SplitMetrics,
    pub per_category: BTreeMap<String, SplitMetrics>,
    pub n: usize,
}

/// Metric key for accuracy at a threshold, e.g. `acc@0.5`.
pub fn acc_key(tau: f64) -> String {
    format!("acc@{tau}")
}

/// Accumulates per-example metrics and averages them per split.
#[derive(Debug, Default)]
pub(crate) struct ReportBuilder {
    rows: Vec<(String, bool, BTreeMap<String, f64>)>,
}

impl ReportBuilder {
    pub(crate) fn push(&mut self, category: &str, unique: bool, metrics: BTreeMap<String, f64>) {
        self.rows.push((category.to_string(), unique, metrics));
    }

    fn average<'a>(rows: impl Iterator<Item = &'a BTreeMap<String, f64>>) -> SplitMetrics {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut n = 0;
        for m in rows {
            n += 1;
            for (k, v) in m {
                *sums.entry(k.clone()).or_default() += v;
            }
        }
        for v in sums.values_mut() {
            *v /= n as f64;
        }
        SplitMetrics { n, metrics: sums }
    }

    pub(crate) fn finish(self, task: Task) -> EvalReport {
        let overall = Self::average(self.rows.iter().map(|r| &r.2));
        let unique = Self::average(self.rows.iter().filter(|r| r.1).map(|r| &r.2));
        let non_unique = Self::average(self.rows.iter().filter(|r| !r.1).map(|r| &r.2));
        let cats: BTreeSet<&String> = self.rows.iter().map(|r| &r.0).collect();
        let per_category = cats
            .into_iter()
            .map(|c| (c.clone(), Self::average(self.rows.iter().filter(|r| &r.0 == c).map(|r| &r.2))))
            .collect();
        EvalReport {
            task,
            n: overall.n,
            overall: overall.metrics,
            unique,
            non_unique,
            per_category,
        }
    }
}

/// A REC prediction. `choices` is a weighted set of boxes (weights summing
/// to 1); a single deterministic prediction has one choice of weight 1. A
/// `None` box stands for an unparseable output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecPrediction {
    pub id: String,
    pub choices: Vec<(Option<BBox>, f64)>,
}

impl RecPrediction {
    pub fn single(id: impl Into<String>, bbox: Option<BBox>) -> Self {
        Self {
            id: id.into(),
            choices: vec![(bbox, 1.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecTruth {
    pub id: String,
    pub bbox: BBox,
    pub category: String,
    pub unique: bool,
}

/// Treatment of predictions that failed to parse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unparseable {
    /// Counted as a miss with IoU 0.
    #[default]
    Miss,
    /// Left out of every average.
    Drop,
}

/// Acc@tau (fraction of examples whose IoU strictly exceeds tau) for each
/// threshold, plus mean IoU, overall and per split.
pub fn acc_at_tau(
    predictions: &[RecPrediction],
    ground_truths: &[RecTruth],
    taus: &[f64],
    unparseable: Unparseable,
) -> Result<EvalReport, EvalError> {
    if predictions.len() != ground_truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            ground_truths: ground_truths.len(),
        });
    }
    if let Some(&t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(EvalError::InvalidThreshold(t));
    }
    let mut builder = ReportBuilder::default();
    for (index, (p, g)) in predictions.iter().zip(ground_truths).enumerate() {
        if p.id != g.id {
            return Err(EvalError::IdMismatch {
                index,
                prediction: p.id.clone(),
                ground_truth: g.id.clone(),
            });
        }
        let parsed: Vec<(BBox, f64)> = p.choices.iter().filter_map(|(b, w)| b.map(|b| (b, *w))).collect();
        if unparseable == Unparseable::Drop && parsed.is_empty() {
            continue;
        }
        let mut m = BTreeMap::new();
        for &tau in taus {
            let hit: f64 = parsed.iter().filter(|(b, _)| box_iou(b, &g.bbox) > tau).map(|(_, w)| w).sum();
            m.insert(acc_key(tau), hit);
        }
        let iou: f64 = parsed.iter().map(|(b, w)| w * box_iou(b, &g.bbox)).sum();
        m.insert("mean_iou".to_string(), iou);
        builder.push(&g.category, g.unique, m);
    }
    Ok(builder.finish(Task::Rec))
}

/// Mean of per-example mask IoUs.
pub fn dataset_giou(per_example_ious: &[f64]) -> Result<f64, EvalError> {
    if per_example_ious.is_empty() {
        return Err(EvalError::Empty("IoU list"));
    }
    Ok(per_example_ious.iter().sum::<f64>() / per_example_ious.len() as f64)
}

/// Anything the few-shot sampler can select.
pub trait FewShotItem {
    fn category(&self) -> &str;
    /// Shots contributed by the record (its box count, at least one).
    fn shots(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotConfig {
    pub shots: usize,
    /// Categories to sample; empty means every category present in the pool.
    #[serde(default)]
    pub categories: Vec<String>,
    pub seed: u64,
    #[serde(default = "yes")]
    pub nesting: bool,
}

fn yes() -> bool {
    true
}

fn category_stream(category: &str) -> u64 {
    // FNV-1a
    category.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// K-shot selection. Returns pool indices in pool order.
///
/// Each category's records are visited in a seeded permutation and taken
/// while fewer than K shots have been collected. With one box per record
/// this yields exactly `min(K, available)` records per category. With
/// `nesting`, the permutation does not depend on K, so smaller selections
/// are prefixes of larger ones.
pub fn few_shot_sample<T: FewShotItem>(pool: &[T], cfg: &FewShotConfig) -> Result<Vec<usize>, EvalError> {
    let present: BTreeSet<&str> = pool.iter().map(|r| r.category()).collect();
    let wanted: Vec<&str> = if cfg.categories.is_empty() {
        present.iter().copied().collect()
    } else {
        for c in &cfg.categories {
            if !present.contains(c.as_str()) {
                return Err(EvalError::UnknownCategory(c.clone()));
            }
        }
        cfg.categories.iter().map(String::as_str).collect()
    };
    let mut selected = Vec::new();
    for cat in wanted {
        let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].category() == cat).collect();
        let seed = if cfg.nesting {
            cfg.seed
        } else {
            cfg.seed ^ (cfg.shots as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        };
        members.shuffle(&mut rng_for(seed, category_stream(cat)));
        let mut got = 0;
        for i in members {
            if got >= cfg.shots {
                break;
            }
            got += pool[i].shots().max(1);
            selected.push(i);
        }
    }
    selected.sort_unstable();
    selected.dedup();
    Ok(selected)
}
