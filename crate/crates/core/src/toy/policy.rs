//! Log-linear policy over an enumerable candidate-answer space.
//!
//! `pi(c) = softmax(theta . phi(c) / T)` where `phi(c)` is a small feature
//! vector of candidate `c`. Log-probabilities and their parameter gradients
//! are exact, and so is the KL divergence to a reference policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grpo::DifferentiablePolicy;
use crate::structured_output::{emit, wrap_completion, OvdItem, ParsedAnswer, Task};

use super::query::{gres_item, Example, QuerySpec};
use super::scene::Scene;
use super::ToyError;

pub const FEATURE_DIM: usize = 9;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "category_match",
    "relation_satisfied",
    "area_frac",
    "center_x",
    "center_y",
    "jittered",
    "jitter_dx",
    "jitter_dy",
    "count",
];
/// Largest object subset offered as an OVD or GRES candidate.
pub const SUBSET_CAP: usize = 4;
const JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Jitter {
    Left,
    Right,
    Up,
    Down,
}

impl Jitter {
    pub const ALL: [Jitter; 4] = [Jitter::Left, Jitter::Right, Jitter::Up, Jitter::Down];

    fn offset(self) -> (f64, f64) {
        match self {
            Jitter::Left => (-JITTER, 0.0),
            Jitter::Right => (JITTER, 0.0),
            Jitter::Up => (0.0, -JITTER),
            Jitter::Down => (0.0, JITTER),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub answer: ParsedAnswer,
    /// Objects the answer refers to.
    pub objects: Vec<usize>,
    pub jitter: Option<Jitter>,
    pub features: [f64; FEATURE_DIM],
}

fn object_features(scene: &Scene, example: &Example, i: usize) -> [f64; FEATURE_DIM] {
    let o = &scene.objects[i];
    let (cx, cy) = o.bbox.center();
    [
        f64::from(u8::from(o.category == example.query.category)),
        f64::from(u8::from(example.targets.contains(&i))),
        o.bbox.area() / scene.area(),
        cx / scene.width as f64,
        cy / scene.height as f64,
        0.0,
        0.0,
        0.0,
        1.0,
    ]
}

/// All subsets of `0..n` with at most `cap` elements, by size then lexicographically.
pub fn bounded_subsets(n: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut layer: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..cap.min(n) {
        let mut next = Vec::new();
        for s in &layer {
            let start = s.last().map_or(0, |l| l + 1);
            for j in start..n {
                let mut t = s.clone();
                t.push(j);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// Enumerates the candidate answers for a query.
///
/// REC: every object box plus four jittered copies (shifted by 10% of the
/// box size, clipped to the canvas). OVD and GRES: every object subset up to
/// [`SUBSET_CAP`] elements, the empty subset meaning "None".
pub fn candidates(scene: &Scene, example: &Example) -> Vec<Candidate> {
    let n = scene.objects.len();
    match example.query.task {
        Task::Rec => {
            let mut out = Vec::with_capacity(5 * n);
            for i in 0..n {
                let base = object_features(scene, example, i);
                let b = scene.objects[i].bbox;
                out.push(Candidate {
                    answer: ParsedAnswer::Rec(b),
                    objects: vec![i],
                    jitter: None,
                    features: base,
                });
                for j in Jitter::ALL {
                    let (fx, fy) = j.offset();
                    let (dx, dy) = (fx * b.width(), fy * b.height());
                    let (w, h) = (scene.width as f64, scene.height as f64);
                    let jb = crate::geometry::BBox::new(
                        (b.x1 + dx).clamp(0.0, w),
                        (b.y1 + dy).clamp(0.0, h),
                        (b.x2 + dx).clamp(0.0, w),
                        (b.y2 + dy).clamp(0.0, h),
                    )
                    .expect("shifted box stays ordered");
                    let mut f = base;
                    f[2] = jb.area() / scene.area();
                    let (jcx, jcy) = jb.center();
                    f[3] = jcx / w;
                    f[4] = jcy / h;
                    f[5] = 1.0;
                    f[6] = fx;
                    f[7] = fy;
                    out.push(Candidate {
                        answer: ParsedAnswer::Rec(jb),
                        objects: vec![i],
                        jitter: Some(j),
                        features: f,
                    });
                }
            }
            out
        }
        task => {
            let per_object: Vec<[f64; FEATURE_DIM]> = (0..n).map(|i| object_features(scene, example, i)).collect();
            bounded_subsets(n, SUBSET_CAP)
                .into_iter()
                .map(|subset| {
                    let mut f = [0.0; FEATURE_DIM];
                    for &i in &subset {
                        for (acc, v) in f.iter_mut().zip(&per_object[i]) {
                            *acc += v;
                        }
                    }
                    let answer = if task == Task::Ovd {
                        let items: Vec<OvdItem> = subset
                            .iter()
                            .map(|&i| OvdItem {
                                bbox: scene.objects[i].bbox,
                                label: example.query.category.clone(),
                            })
                            .collect();
                        ParsedAnswer::Ovd {
                            is_none: items.is_empty(),
                            items,
                        }
                    } else {
                        ParsedAnswer::Gres {
                            is_none: subset.is_empty(),
                            items: subset.iter().map(|&i| gres_item(scene, i)).collect(),
                        }
                    };
                    Candidate {
                        answer,
                        objects: subset,
                        jitter: None,
                        features: f,
                    }
                })
                .collect()
        }
    }
}

/// Candidate set of one query, the unit the policy acts on.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyContext {
    pub task: Task,
    pub candidates: Vec<Candidate>,
}

impl ToyContext {
    pub fn new(scene: &Scene, example: &Example) -> Self {
        Self {
            task: example.query.task,
            candidates: candidates(scene, example),
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn index_of(&self, answer: &ParsedAnswer) -> Option<usize> {
        self.candidates.iter().position(|c| &c.answer == answer)
    }
}

/// Corruptions of the tag structure used to exercise the format reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    DropAnswerClose,
    SwapOrder,
    DropThinkOpen,
    DuplicateThink,
    TextOutsideTags,
}

impl Fault {
    pub const ALL: [Fault; 5] = [
        Fault::DropAnswerClose,
        Fault::SwapOrder,
        Fault::DropThinkOpen,
        Fault::DuplicateThink,
        Fault::TextOutsideTags,
    ];
}

pub fn think_text(query: &QuerySpec, n_objects: usize) -> String {
    format!(
        "selecting the {} {} among {n_objects} objects in the scene",
        query.relation, query.category
    )
}

/// Renders a candidate as a tagged completion, optionally corrupted.
pub fn render_completion(query: &QuerySpec, n_objects: usize, answer: &ParsedAnswer, fault: Option<Fault>) -> String {
    let think = think_text(query, n_objects);
    let ans = emit(answer);
    match fault {
        None => wrap_completion(&think, &ans),
        Some(Fault::DropAnswerClose) => format!("<think>{think}</think>\n<answer>{ans}"),
        Some(Fault::SwapOrder) => format!("<answer>{ans}</answer>\n<think>{think}</think>"),
        Some(Fault::DropThinkOpen) => format!("{think}</think>\n<answer>{ans}</answer>"),
        Some(Fault::DuplicateThink) => format!("<think>{think}</think><think>again</think>\n<answer>{ans}</answer>"),
        Some(Fault::TextOutsideTags) => format!("{}\ndone", wrap_completion(&think, &ans)),
    }
}

fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyPolicy {
    pub params: Vec<f64>,
    pub temperature: f64,
}

impl Default for ToyPolicy {
    fn default() -> Self {
        Self::zeros(1.0)
    }
}

impl ToyPolicy {
    pub fn zeros(temperature: f64) -> Self {
        Self {
            params: vec![0.0; FEATURE_DIM],
            temperature,
        }
    }

    pub fn new(params: Vec<f64>, temperature: f64) -> Result<Self, ToyError> {
        if params.len() != FEATURE_DIM {
            return Err(ToyError::ParamDim {
                expected: FEATURE_DIM,
                got: params.len(),
            });
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ToyError::Temperature(temperature));
        }
        Ok(Self { params, temperature })
    }

    pub fn scores(&self, ctx: &ToyContext) -> Vec<f64> {
        ctx.candidates
            .iter()
            .map(|c| c.features.iter().zip(&self.params).map(|(f, p)| f * p).sum::<f64>() / self.temperature)
            .collect()
    }

    pub fn log_probs(&self, ctx: &ToyContext) -> Vec<f64> {
        log_softmax(&self.scores(ctx))
    }

    pub fn probs(&self, ctx: &ToyContext) -> Vec<f64> {
        self.log_probs(ctx).into_iter().map(f64::exp).collect()
    }

    fn expected_features(&self, ctx: &ToyContext, probs: &[f64]) -> [f64; FEATURE_DIM] {
        let mut e = [0.0; FEATURE_DIM];
        for (c, p) in ctx.candidates.iter().zip(probs) {
            for (acc, f) in e.iter_mut().zip(&c.features) {
                *acc += p * f;
            }
        }
        e
    }

    pub fn sample_index(&self, ctx: &ToyContext, rng: &mut impl Rng) -> usize {
        let probs = self.probs(ctx);
        let mut u: f64 = rng.random();
        for (i, p) in probs.iter().enumerate() {
            if u < *p {
                return i;
            }
            u -= p;
        }
        probs.len() - 1
    }

    /// Indices of every candidate attaining the maximum score.
    pub fn greedy_set(&self, ctx: &ToyContext) -> Vec<usize> {
        let s = self.scores(ctx);
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..s.len()).filter(|&i| s[i] == m).collect()
    }

    /// Samples a candidate and renders it; with probability `fault_rate` the
    /// tag structure is corrupted.
    pub fn sample_completion(
        &self,
        ctx: &ToyContext,
        query: &QuerySpec,
        n_objects: usize,
        rng: &mut impl Rng,
        fault_rate: f64,
    ) -> (usize, String) {
        let idx = self.sample_index(ctx, rng);
        let fault = (fault_rate > 0.0 && rng.random_bool(fault_rate.min(1.0)))
            .then(|| Fault::ALL[rng.random_range(0..Fault::ALL.len())]);
        (idx, render_completion(query, n_objects, &ctx.candidates[idx].answer, fault))
    }

    /// Log-probability of a specific answer and its gradient.
    pub fn answer_log_prob(&self, ctx: &ToyContext, answer: &ParsedAnswer) -> Result<(f64, Vec<f64>), ToyError> {
        let idx = ctx.index_of(answer).ok_or(ToyError::NotACandidate)?;
        Ok(self.log_prob_and_grad(ctx, idx))
    }

    /// One supervised step: gradient ascent on `log pi(target)`. Returns the
    /// log-probability before the update.
    pub fn sft_step(&mut self, ctx: &ToyContext, target: usize, lr: f64) -> f64 {
        let (lp, g) = self.log_prob_and_grad(ctx, target);
        for (p, gi) in self.params.iter_mut().zip(&g) {
            *p += lr * gi;
        }
        lp
    }
}

impl DifferentiablePolicy for ToyPolicy {
    type Context = ToyContext;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn log_prob_and_grad(&self, ctx: &ToyContext, action: usize) -> (f64, Vec<f64>) {
        let lps = self.log_probs(ctx);
        let probs: Vec<f64> = lps.iter().map(|l| l.exp()).collect();
        let e = self.expected_features(ctx, &probs);
        let f = &ctx.candidates[action].features;
        let grad = (0..FEATURE_DIM).map(|k| (f[k] - e[k]) / self.temperature).collect();
        (lps[action], grad)
    }

    fn exact_kl_and_grad(&self, reference: &Self, ctx: &ToyContext) -> Option<(f64, Vec<f64>)> {
        let lp = self.log_probs(ctx);
        let lq = reference.log_probs(ctx);
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(pi, (a, b))| pi * (a - b)).sum();
        let mut grad = vec![0.0; FEATURE_DIM];
        for (c, (pi, (a, b))) in ctx.candidates.iter().zip(p.iter().zip(lp.iter().zip(&lq))) {
            let w = pi * (a - b - kl) / self.temperature;
            for (g, f) in grad.iter_mut().zip(&c.features) {
                *g += w * f;
            }
        }
        Some((kl, grad))
    }
}
