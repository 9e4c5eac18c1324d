//! Greedy evaluation of a toy policy over generated or loaded instances.
//!
//! Greedy decoding picks the highest-scoring candidate. When several
//! candidates tie for the maximum, every tied candidate counts with equal
//! weight, so an untrained (all-zero) policy scores exactly the expectation
//! under a uniform candidate choice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rewards::{answer_metrics, GroundTruth};
use crate::structured_output::{OvdItem, ParsedAnswer, Task};
use crate::toy::{generate_instances, GenSpec, Instance, ToyPolicy, ToySegmenter};

use super::{acc_at_tau, coco_iou_thresholds, coco_map, dataset_giou, EvalError, EvalReport, RecPrediction, RecTruth, ReportBuilder, Unparseable};

fn task_of(instances: &[Instance]) -> Result<Task, EvalError> {
    let first = instances.first().ok_or(EvalError::Empty("evaluation set"))?.example.query.task;
    for inst in instances {
        let t = inst.example.query.task;
        if t != first {
            return Err(EvalError::MixedTasks(first, t));
        }
    }
    Ok(first)
}

/// Evaluates greedy decoding. REC reports `acc@tau` for each threshold and
/// `mean_iou`; OVD reports the per-image `reward` and dataset `map`; GRES
/// reports per-image `iou` and dataset `giou`.
pub fn evaluate_policy(policy: &ToyPolicy, instances: &[Instance], taus: &[f64]) -> Result<EvalReport, EvalError> {
    let task = task_of(instances)?;
    let greedy: Vec<(Vec<usize>, crate::toy::ToyContext)> = instances
        .iter()
        .map(|inst| {
            let ctx = inst.context();
            (policy.greedy_set(&ctx), ctx)
        })
        .collect();

    if task == Task::Rec {
        let mut preds = Vec::with_capacity(instances.len());
        let mut truths = Vec::with_capacity(instances.len());
        for (inst, (set, ctx)) in instances.iter().zip(&greedy) {
            let w = 1.0 / set.len() as f64;
            let choices = set
                .iter()
                .map(|&c| match &ctx.candidates[c].answer {
                    ParsedAnswer::Rec(b) => (Some(*b), w),
                    _ => (None, w),
                })
                .collect();
            preds.push(RecPrediction {
                id: inst.id.clone(),
                choices,
            });
            let GroundTruth::Rec { bbox } = inst.example.ground_truth else {
                unreachable!("REC instance carries a box ground truth")
            };
            truths.push(RecTruth {
                id: inst.id.clone(),
                bbox,
                category: inst.example.query.category.clone(),
                unique: inst.example.unique,
            });
        }
        return acc_at_tau(&preds, &truths, taus, Unparseable::Miss);
    }

    let key = if task == Task::Ovd { "reward" } else { "iou" };
    let mut builder = ReportBuilder::default();
    let mut per_example = Vec::with_capacity(instances.len());
    let mut map_preds: Vec<Vec<OvdItem>> = Vec::new();
    let mut map_gts: Vec<Vec<OvdItem>> = Vec::new();
    for (inst, (set, ctx)) in instances.iter().zip(&greedy) {
        let mut value = 0.0;
        for &c in set {
            value += answer_metrics(&ctx.candidates[c].answer, &inst.example.ground_truth, &ToySegmenter, &inst.scene)?;
        }
        value /= set.len() as f64;
        per_example.push(value);
        builder.push(
            &inst.example.query.category,
            inst.example.unique,
            BTreeMap::from([(key.to_string(), value)]),
        );
        if task == Task::Ovd {
            if let (ParsedAnswer::Ovd { items, .. }, GroundTruth::Ovd { items: gt }) =
                (&ctx.candidates[set[0]].answer, &inst.example.ground_truth)
            {
                map_preds.push(items.clone());
                map_gts.push(gt.clone());
            }
        }
    }
    let mut report = builder.finish(task);
    if task == Task::Ovd {
        let m = coco_map(&map_preds, &map_gts, &coco_iou_thresholds())?;
        report.overall.insert("map".to_string(), m.map);
    } else {
        report.overall.insert("giou".to_string(), dataset_giou(&per_example)?);
    }
    Ok(report)
}

/// Named generator configuration used as an evaluation source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub spec: GenSpec,
}

impl SourceSpec {
    pub fn instances(&self) -> Vec<Instance> {
        generate_instances(&self.spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalReport {
    pub train_source: String,
    pub eval_source: String,
    pub report: EvalReport,
}

/// Zero-shot evaluation of a policy trained on `train_source` against
/// `eval_source`. No parameters are updated.
pub fn cross_eval(
    train_source: &SourceSpec,
    eval_source: &SourceSpec,
    policy: &ToyPolicy,
    taus: &[f64],
) -> Result<CrossEvalReport, EvalError> {
    let report = evaluate_policy(policy, &eval_source.instances(), taus)?;
    Ok(CrossEvalReport {
        train_source: train_source.name.clone(),
        eval_source: eval_source.name.clone(),
        report,
    })
}
