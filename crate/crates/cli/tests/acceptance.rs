//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::collections::{BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use axum::body::Body;
use axum::http::Request;
use georef::checkpoint::Checkpoint;
use georef::config::{Algorithm, RunConfig};
use georef::dataset::SceneRecord;
use georef::evalkit::{
    coco_iou_thresholds, cross_eval, evaluate_policy, few_shot_sample, single_image_map, FewShotConfig, SourceSpec,
};
use georef::geometry::{box_iou, mask_iou, rasterize_box, BBox, Keypoint};
use georef::grpo::{
    compute_advantages, exact_kl, k3, objective_and_gradient, DifferentiablePolicy, GrpoConfig, Group, KlMode, Rollout,
};
use georef::rewards::{answer_metrics, ovd_length_penalty, reward_gres, BoxSegmenter, GroundTruth, RewardConfig, Segmenter};
use georef::scoring::{score_json, ScoreGroundTruth, ScoreRequest};
use georef::structured_output::{
    emit, extract_tagged, format_reward, parse_answer, parse_completion, wrap_completion, FormatMode, GresItem, OvdItem,
    ParsedAnswer, Task,
};
use georef::toy::policy::think_text;
use georef::toy::query::gres_item;
use georef::toy::{generate_instances, generate_scene, rng_for, GenSpec, Instance, Profile, Scene, ToyContext, ToyPolicy, ToySegmenter, FEATURE_DIM};
use georef::train::{checkpoint_path, load_instances, run_training, Trainer};
use georef_cli::service::router;
use http_body_util::BodyExt;
use rand::Rng;
use serde_json::Value;
use tower::ServiceExt;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("advantage oracle", c1_advantages),
        ("surrogate gradient vs finite differences", c2_gradient),
        ("KL estimator", c3_kl),
        ("reward oracles", c4_reward_oracles),
        ("parser fidelity", c5_parser),
        ("few-shot protocol", c6_few_shot),
        ("end-to-end GRPO training", c7_training),
        ("GRPO vs SFT at 1-shot", c8_grpo_vs_sft),
        ("cross-distribution evaluation", c9_cross_eval),
        ("operational: resume, service, schemas", c10_operational),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// 1

fn group_of(rewards: &[f64]) -> Group {
    let rollouts = rewards
        .iter()
        .enumerate()
        .map(|(i, r)| Rollout {
            action: i,
            completion: String::new(),
            logp_current: -1.0,
            logp_old: -1.0,
            logp_ref: -1.0,
            reward: *r,
        })
        .collect();
    Group::new("q", rollouts)
}

/// Advantages with a Welford running variance, a different route from the
/// library's two-pass moments.
fn advantage_oracle(r: &[f64], eps: f64) -> Vec<f64> {
    if r.iter().all(|x| x.to_bits() == r[0].to_bits()) {
        return vec![0.0; r.len()];
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, x) in r.iter().enumerate() {
        let d = x - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (x - mean);
    }
    let sd = (m2 / r.len() as f64).sqrt();
    r.iter().map(|x| (x - mean) / (sd + eps)).collect()
}

fn c1_advantages() -> Outcome {
    let cfg = GrpoConfig::default();
    let mut rng = rng_for(1, 1);
    let groups: Vec<Vec<f64>> = (0..1000)
        .map(|g| {
            let n = rng.random_range(2..=16);
            match g % 4 {
                0 => (0..n).map(|_| rng.random_range(0..=2) as f64).collect(),
                1 => vec![rng.random_range(0.0..2.0); n],
                _ => (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
            }
        })
        .collect();
    let start = Instant::now();
    let advs: Vec<Vec<f64>> = groups
        .iter()
        .map(|r| compute_advantages(&group_of(r), &cfg))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let (mut max_err, mut max_mean, mut spread) = (0.0f64, 0.0f64, 0);
    for (r, a) in groups.iter().zip(&advs) {
        for (x, y) in a.iter().zip(advantage_oracle(r, cfg.std_epsilon)) {
            max_err = max_err.max((x - y).abs());
        }
        if r.iter().any(|x| *x != r[0]) {
            spread += 1;
            max_mean = max_mean.max((a.iter().sum::<f64>() / a.len() as f64).abs());
        }
    }
    ensure!(max_err <= 1e-9, "max |A - oracle| = {max_err:e}");
    ensure!(max_mean <= 1e-9, "max |mean A| = {max_mean:e}");
    ensure!(elapsed < 1.0, "took {elapsed:.3}s");
    Ok(format!(
        "1000 groups, max error {max_err:.1e}, {spread} spread groups with max |mean| {max_mean:.1e}, {:.1} ms",
        elapsed * 1e3
    ))
}

// 2

/// Groups with random actions and rewards; old and reference policies are
/// drawn around `theta` with the given spread.
fn toy_batch(seed: u64, theta: &[f64], n_groups: usize, old_spread: f64) -> (Vec<Group>, Vec<ToyContext>) {
    let mut rng = rng_for(seed, 99);
    let tasks = [Task::Rec, Task::Ovd, Task::Gres];
    let spec = GenSpec {
        seed,
        task: tasks[(seed % 3) as usize],
        count: n_groups,
        difficulty: 2,
        ..GenSpec::default()
    };
    let old = ToyPolicy::new(theta.iter().map(|t| t + rng.random_range(-old_spread..=old_spread)).collect(), 0.8).unwrap();
    let reference = ToyPolicy::new(theta.iter().map(|t| t + rng.random_range(-0.5..0.5)).collect(), 0.8).unwrap();
    let mut groups = Vec::new();
    let mut contexts = Vec::new();
    for inst in generate_instances(&spec) {
        let ctx = inst.context();
        let rollouts = (0..4)
            .map(|_| {
                let action = rng.random_range(0..ctx.len());
                Rollout {
                    action,
                    completion: String::new(),
                    logp_current: f64::NAN,
                    logp_old: old.log_prob(&ctx, action),
                    logp_ref: reference.log_prob(&ctx, action),
                    reward: rng.random_range(0.0..2.0),
                }
            })
            .collect();
        groups.push(Group::new(inst.id.clone(), rollouts));
        contexts.push(ctx);
    }
    (groups, contexts)
}

fn c2_gradient() -> Outcome {
    let h = 1e-5;
    let start = Instant::now();
    // (name, old-policy spread, beta, kl mode)
    let regimes = [
        ("interior", 0.0, 0.0, KlMode::Estimator),
        ("clipped", 1.5, 0.0, KlMode::Estimator),
        ("kl-k3", 0.3, 0.05, KlMode::Estimator),
        ("kl-exact", 0.3, 0.05, KlMode::Exact),
    ];
    let mut report = Vec::new();
    let mut instances = 0;
    for (name, spread, beta, mode) in regimes {
        let (mut checked, mut skipped, mut max_err, mut clipped_batches) = (0, 0, 0.0f64, 0);
        for seed in 0..25u64 {
            let mut rng = rng_for(seed, 5);
            let theta: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (groups, contexts) = toy_batch(seed, &theta, 4, spread);
            if name == "interior" {
                instances += groups.len();
            }
            let policy = ToyPolicy::new(theta.clone(), 0.8).unwrap();
            let reference = ToyPolicy::new(theta.iter().map(|t| t * 0.5).collect(), 0.8).unwrap();
            let cfg = GrpoConfig { kl_beta: beta, kl_mode: mode, ..GrpoConfig::default() };
            let (_, grad, stats) =
                objective_and_gradient(&policy, &reference, &groups, &contexts, &cfg).map_err(|e| e.to_string())?;
            if stats.clip_frac > 0.0 {
                clipped_batches += 1;
            }
            for (k, &g) in grad.iter().enumerate() {
                let shifted = |d: f64| {
                    let mut p = policy.clone();
                    p.params[k] += d;
                    objective_and_gradient(&p, &reference, &groups, &contexts, &cfg).unwrap()
                };
                let (fp, _, sp) = shifted(h);
                let (fm, _, sm) = shifted(-h);
                // A rollout crossing a clip boundary inside the stencil makes
                // the objective non-smooth there.
                if sp.clip_frac != stats.clip_frac || sm.clip_frac != stats.clip_frac {
                    skipped += 1;
                    continue;
                }
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - g).abs() / g.abs().max(1e-3);
                ensure!(err < 1e-4, "{name} seed {seed} k {k}: fd {fd} analytic {g} (rel {err:e})");
                max_err = max_err.max(err);
                checked += 1;
            }
        }
        if name == "interior" {
            ensure!(clipped_batches == 0, "interior regime clipped");
        }
        if name == "clipped" {
            ensure!(clipped_batches >= 20, "only {clipped_batches}/25 clipped batches");
        }
        ensure!(checked >= 200, "{name}: only {checked} components checked");
        report.push(format!("{name} {checked} ok/{skipped} skipped max {max_err:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("{instances} instances; {}", report.join(", ")))
}

// 3

fn c3_kl() -> Outcome {
    let mut rng = rng_for(3, 3);
    let mut min = f64::INFINITY;
    for i in 0..1_000_000u32 {
        let scale = if i % 2 == 0 { 5.0 } else { 60.0 };
        let (a, b) = (rng.random_range(-scale..0.0), rng.random_range(-scale..0.0));
        let v = k3(a, b);
        ensure!(v >= 0.0, "k3({a}, {b}) = {v}");
        min = min.min(v);
    }
    let mut zs = Vec::new();
    for (seed, task) in [(4, Task::Rec), (5, Task::Ovd), (6, Task::Gres)] {
        let inst = &generate_instances(&GenSpec { seed, count: 1, task, ..GenSpec::default() })[0];
        let ctx = inst.context();
        let p = ToyPolicy::new((0..FEATURE_DIM).map(|k| 0.2 * k as f64 - 0.5).collect(), 1.0).unwrap();
        let q = ToyPolicy::new(vec![0.1; FEATURE_DIM], 1.0).unwrap();
        let (lp, lq) = (p.log_probs(&ctx), q.log_probs(&ctx));
        let kl = exact_kl(&lp, &lq);
        let mut srng = rng_for(seed, 2);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let i = p.sample_index(&ctx, &mut srng);
                k3(lp[i], lq[i])
            })
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let se = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt() / (n as f64).sqrt();
        let z = (m - kl) / se;
        ensure!(z.abs() < 3.0, "{task}: mean {m} exact {kl} ({z:.2} SE)");
        zs.push(format!("{task} KL {kl:.4} z {z:+.2}"));
    }
    Ok(format!("1e6 values >= 0 (min {min:.1e}); {}", zs.join(", ")))
}

// 4

fn ovd_item(x: f64, label: &str) -> OvdItem {
    OvdItem {
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
        label: label.to_string(),
    }
}

/// Single-image mAP from the PR curve: every prefix of the ranked detections
/// is a PR point and each recall sample takes the best precision among
/// prefixes reaching it.
fn brute_force_map(preds: &[OvdItem], gts: &[OvdItem]) -> f64 {
    let cats: BTreeSet<&str> = gts.iter().map(|g| g.label.as_str()).collect();
    if cats.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let thresholds = coco_iou_thresholds();
    let mut ap_sum = 0.0;
    for cat in &cats {
        let d: Vec<&OvdItem> = preds.iter().filter(|p| p.label == *cat).collect();
        let g: Vec<&OvdItem> = gts.iter().filter(|p| p.label == *cat).collect();
        let mut thr_sum = 0.0;
        for &thr in &thresholds {
            let mut taken = vec![false; g.len()];
            let mut points = Vec::new();
            let mut tp = 0;
            for (k, det) in d.iter().enumerate() {
                let mut best: Option<usize> = None;
                for j in 0..g.len() {
                    let iou = box_iou(&det.bbox, &g[j].bbox);
                    if !taken[j] && iou >= thr && best.is_none_or(|b| iou > box_iou(&det.bbox, &g[b].bbox)) {
                        best = Some(j);
                    }
                }
                if let Some(j) = best {
                    taken[j] = true;
                    tp += 1;
                }
                points.push((tp as f64 / g.len() as f64, tp as f64 / (k + 1) as f64));
            }
            let mut total = 0.0;
            for step in 0..=100 {
                let r = step as f64 / 100.0;
                let best = points
                    .iter()
                    .filter(|(recall, _)| *recall >= r)
                    .fold(0.0f64, |acc, (_, p)| acc.max(*p));
                total += best;
            }
            thr_sum += total / 101.0;
        }
        ap_sum += thr_sum / thresholds.len() as f64;
    }
    ap_sum / cats.len() as f64
}

fn sequences<T: Clone>(alphabet: &[T], max_len: usize) -> Vec<Vec<T>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<T>> = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<T>> = frontier
            .iter()
            .flat_map(|s| {
                alphabet.iter().map(move |a| {
                    let mut t = s.clone();
                    t.push(a.clone());
                    t
                })
            })
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn multisets<T: Clone>(alphabet: &[T], max_len: usize) -> Vec<Vec<T>> {
    fn go<T: Clone>(alphabet: &[T], start: usize, left: usize, cur: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        out.push(cur.clone());
        if left == 0 {
            return;
        }
        for i in start..alphabet.len() {
            cur.push(alphabet[i].clone());
            go(alphabet, i, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(alphabet, 0, max_len, &mut vec![], &mut out);
    out
}

/// Segment, trim with an explicit pixel-centre test, union and count.
fn gres_pixel_oracle(scene: &Scene, items: &[GresItem], gt_objects: &[usize]) -> f64 {
    let (w, h) = (scene.width, scene.height);
    let mut pred = vec![false; w * h];
    for it in items {
        let m = ToySegmenter.segment(scene, &it.bbox, &it.keypoint1, &it.keypoint2, w, h).to_bitmap();
        for r in 0..h {
            for c in 0..w {
                let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
                let in_box = cx >= it.bbox.x1 && cx < it.bbox.x2 && cy >= it.bbox.y1 && cy < it.bbox.y2;
                if m[r * w + c] && in_box {
                    pred[r * w + c] = true;
                }
            }
        }
    }
    let mut gt = vec![false; w * h];
    for &i in gt_objects {
        for (g, b) in gt.iter_mut().zip(scene.objects[i].mask(w, h).to_bitmap()) {
            *g |= b;
        }
    }
    let inter = pred.iter().zip(&gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(&gt).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn random_gres_item(scene: &Scene, rng: &mut impl Rng) -> GresItem {
    let x1 = rng.random_range(0..scene.width - 2);
    let y1 = rng.random_range(0..scene.height - 2);
    let x2 = rng.random_range(x1 + 1..=scene.width);
    let y2 = rng.random_range(y1 + 1..=scene.height);
    let bbox = BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap();
    let mut kp = || Keypoint::new(rng.random_range(x1..x2) as f64 + 0.5, rng.random_range(y1..y2) as f64 + 0.5).unwrap();
    GresItem { bbox, keypoint1: kp(), keypoint2: kp(), clamped: false }
}

fn c4_reward_oracles() -> Outcome {
    let mut rng = rng_for(4, 4);
    fn int_box(rng: &mut impl Rng) -> BBox {
        let x = rng.random_range(0..40u32);
        let y = rng.random_range(0..40u32);
        let w = rng.random_range(1..=24u32);
        let h = rng.random_range(1..=24u32);
        BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
    }
    for _ in 0..10_000 {
        let (a, b) = (int_box(&mut rng), int_box(&mut rng));
        let (ma, mb) = (rasterize_box(&a, 64, 64), rasterize_box(&b, 64, 64));
        let m = mask_iou(&ma, &mb).map_err(|e| e.to_string())?;
        ensure!(box_iou(&a, &b) == m, "{a:?} {b:?}: box {} mask {m}", box_iou(&a, &b));
    }

    for n_gt in 0..=12usize {
        for n in 0..=12usize {
            let closed = if n == 0 { 1.0 } else { (n_gt as f64 / n as f64).sqrt().min(1.0) };
            let got = ovd_length_penalty(n_gt, n);
            ensure!(got == closed, "penalty({n_gt}, {n}) = {got}, expected {closed}");
        }
    }

    // Offsets 0, 1, 3 give IoUs 1, 0.82, 0.54 against the box at 0.
    let pred_alphabet = [
        ovd_item(0.0, "ship"),
        ovd_item(1.0, "ship"),
        ovd_item(3.0, "ship"),
        ovd_item(20.0, "ship"),
        ovd_item(0.0, "tank"),
    ];
    let gt_alphabet = [ovd_item(0.0, "ship"), ovd_item(20.0, "ship"), ovd_item(0.0, "tank")];
    let preds = sequences(&pred_alphabet, 5);
    let gts = multisets(&gt_alphabet, 5);
    for g in &gts {
        for p in &preds {
            let (a, b) = (single_image_map(p, g), brute_force_map(p, g));
            ensure!(a == b, "mAP {a} vs oracle {b} for preds {p:?} gts {g:?}");
        }
    }
    let map_cases = preds.len() * gts.len();

    for seed in 0..1000u64 {
        let scene = generate_scene(seed, 3);
        let n = scene.objects.len();
        let items: Vec<GresItem> = (0..rng.random_range(0..=4))
            .map(|_| {
                if rng.random_bool(0.6) {
                    gres_item(&scene, rng.random_range(0..n))
                } else {
                    random_gres_item(&scene, &mut rng)
                }
            })
            .collect();
        let gt_obj: Vec<usize> = {
            let mut v: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..n)).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let gt = GroundTruth::Gres {
            masks: gt_obj.iter().map(|&i| scene.objects[i].mask(scene.width, scene.height)).collect(),
            width: scene.width,
            height: scene.height,
        };
        let answer = ParsedAnswer::Gres { is_none: items.is_empty(), items: items.clone() };
        let r = reward_gres(&wrap_completion("t", &emit(&answer)), &gt, &ToySegmenter, &scene, &RewardConfig::default())
            .map_err(|e| e.to_string())?;
        let oracle = gres_pixel_oracle(&scene, &items, &gt_obj);
        ensure!(r.metrics == oracle, "scene {seed}: reward {} vs pixel loop {oracle}", r.metrics);
    }
    Ok(format!(
        "10000 box pairs exact, 169 penalty cells exact, {map_cases} mAP cases exact, 1000 GRES scenes exact"
    ))
}

// 5

const REC_TEMPLATE: &str = "[12, 34, 156, 178]";

const OVD_TEMPLATE: &str = "```json
[
{
    \"bbox_2d\": [10, 20, 40, 60],
    \"label\": \"ship\"
},
{
    \"bbox_2d\": [50.5, 5, 90, 45.25],
    \"label\": \"storage tank\"
}
]
```";

const GRES_TEMPLATE: &str = "```json
[
{
    \"bbox_2d\": [10, 20, 40, 60],
    \"keypoint1\": [20, 30],
    \"keypoint2\": [35, 55]
},
{
    \"bbox_2d\": [50, 5, 90, 45],
    \"keypoint1\": [60.5, 10],
    \"keypoint2\": [88, 44]
}
]
```";

const THINK_TEXT: &str = "The query asks for the leftmost ship. Two ships are visible; the first lies further left.";

fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn kp(x: f64, y: f64) -> Keypoint {
    Keypoint::new(x, y).unwrap()
}

fn template_cases() -> Vec<(Task, &'static str, ParsedAnswer)> {
    vec![
        (Task::Rec, REC_TEMPLATE, ParsedAnswer::Rec(bb(12.0, 34.0, 156.0, 178.0))),
        (
            Task::Ovd,
            OVD_TEMPLATE,
            ParsedAnswer::Ovd {
                items: vec![
                    OvdItem { bbox: bb(10.0, 20.0, 40.0, 60.0), label: "ship".into() },
                    OvdItem { bbox: bb(50.5, 5.0, 90.0, 45.25), label: "storage tank".into() },
                ],
                is_none: false,
            },
        ),
        (
            Task::Gres,
            GRES_TEMPLATE,
            ParsedAnswer::Gres {
                items: vec![
                    GresItem { bbox: bb(10.0, 20.0, 40.0, 60.0), keypoint1: kp(20.0, 30.0), keypoint2: kp(35.0, 55.0), clamped: false },
                    GresItem { bbox: bb(50.0, 5.0, 90.0, 45.0), keypoint1: kp(60.5, 10.0), keypoint2: kp(88.0, 44.0), clamped: false },
                ],
                is_none: false,
            },
        ),
    ]
}

fn same_bits(a: &ParsedAnswer, b: &ParsedAnswer) -> bool {
    fn box_bits(b: &BBox) -> [u64; 4] {
        b.to_array().map(f64::to_bits)
    }
    match (a, b) {
        (ParsedAnswer::Rec(x), ParsedAnswer::Rec(y)) => box_bits(x) == box_bits(y),
        (ParsedAnswer::Ovd { items: x, is_none: nx }, ParsedAnswer::Ovd { items: y, is_none: ny }) => {
            nx == ny
                && x.len() == y.len()
                && x.iter().zip(y).all(|(p, q)| p.label == q.label && box_bits(&p.bbox) == box_bits(&q.bbox))
        }
        (ParsedAnswer::Gres { items: x, is_none: nx }, ParsedAnswer::Gres { items: y, is_none: ny }) => {
            nx == ny
                && x.len() == y.len()
                && x.iter().zip(y).all(|(p, q)| {
                    box_bits(&p.bbox) == box_bits(&q.bbox)
                        && [p.keypoint1.x, p.keypoint1.y, p.keypoint2.x, p.keypoint2.y].map(f64::to_bits)
                            == [q.keypoint1.x, q.keypoint1.y, q.keypoint2.x, q.keypoint2.y].map(f64::to_bits)
                        && p.clamped == q.clamped
                })
        }
        _ => false,
    }
}

/// Completion mutations with their hand-assigned strict-mode format reward.
/// `None` labels depend on the task and are resolved in [`mutation_label`].
const MUTATIONS: [(&str, Option<u8>); 10] = [
    ("canonical", Some(1)),
    ("drop <think>", Some(0)),
    ("drop </answer>", Some(0)),
    ("answer before think", Some(0)),
    ("truncated answer JSON", Some(0)),
    ("code fence", Some(1)),
    ("answer None", None),
    ("duplicate think", Some(0)),
    ("prose outside tags", Some(0)),
    ("whitespace between blocks", Some(1)),
];

fn mutation_label(kind: usize, task: Task) -> u8 {
    MUTATIONS[kind].1.unwrap_or(match task {
        // A box is required; None is not JSON.
        Task::Rec => 0,
        Task::Ovd | Task::Gres => 1,
    })
}

fn mutate(kind: usize, think: &str, answer: &str) -> String {
    let block = |t: &str, a: &str| format!("<think>{t}</think><answer>{a}</answer>");
    match kind {
        0 => block(think, answer),
        1 => format!("{think}</think><answer>{answer}</answer>"),
        2 => format!("<think>{think}</think><answer>{answer}"),
        3 => format!("<answer>{answer}</answer><think>{think}</think>"),
        4 => block(think, &answer[..answer.len() - 1]),
        5 => block(think, &format!("```json\n{answer}\n```")),
        6 => block(think, "None"),
        7 => format!("<think>{think}</think><think>{think}</think><answer>{answer}</answer>"),
        8 => format!("Sure! <think>{think}</think><answer>{answer}</answer>"),
        9 => format!("  \n<think>{think}</think>\n\n<answer>\n{answer}\n</answer>\n"),
        _ => unreachable!(),
    }
}

/// Fifty base completions from toy instances over all three tasks, with
/// OVD negatives among them.
fn mutation_bases() -> Vec<Instance> {
    let mut out = Vec::new();
    for (task, count, seed) in [(Task::Rec, 17, 50), (Task::Ovd, 17, 51), (Task::Gres, 16, 52)] {
        let spec = GenSpec { seed, task, count, negative_rate: 0.3, ..GenSpec::default() };
        out.extend(generate_instances(&spec));
    }
    out
}

/// The labeled corpus: (instance index, mutation kind, completion, label).
fn mutation_corpus(bases: &[Instance]) -> Vec<(usize, usize, String, u8)> {
    let mut out = Vec::new();
    for (i, inst) in bases.iter().enumerate() {
        let think = think_text(&inst.example.query, inst.scene.objects.len());
        let answer = emit(&inst.example.answer);
        for kind in 0..MUTATIONS.len() {
            let task = inst.example.query.task;
            out.push((i, kind, mutate(kind, &think, &answer), mutation_label(kind, task)));
        }
    }
    out
}

fn c5_parser() -> Outcome {
    for (task, text, expected) in template_cases() {
        let parsed = parse_answer(task, text).map_err(|e| format!("{task} template: {e}"))?;
        ensure!(same_bits(&parsed, &expected), "{task} template parsed to {parsed:?}");
        let canonical = emit(&parsed);
        let again = parse_answer(task, &canonical).map_err(|e| format!("{task} canonical: {e}"))?;
        ensure!(same_bits(&again, &expected), "{task} canonical form changed the value");
        ensure!(emit(&again) == canonical, "{task}: emit is not a fixed point");

        // Thinking wrapper around the raw template text.
        let completion = format!("<think>{THINK_TEXT}</think> <answer>{text}</answer>");
        let tagged = extract_tagged(&completion);
        ensure!(tagged.well_formed && tagged.think == THINK_TEXT && tagged.answer == text, "{task}: tag split");
        let from_completion = parse_completion(&completion, task).map_err(|e| e.to_string())?;
        ensure!(same_bits(&from_completion, &expected), "{task}: wrapped template value");
        ensure!(format_reward(&completion, task, FormatMode::Strict) == 1, "{task}: wrapped template format");
        ensure!(wrap_completion(THINK_TEXT, &canonical) == format!("<think>{THINK_TEXT}</think><answer>{canonical}</answer>"), "wrap");
    }

    let bases = mutation_bases();
    ensure!(bases.iter().any(|b| matches!(b.example.answer, ParsedAnswer::Ovd { is_none: true, .. })), "no OVD negatives");
    let corpus = mutation_corpus(&bases);
    ensure!(corpus.len() == 500, "corpus has {} cases", corpus.len());
    let mut per_label = [0usize; 2];
    for (i, kind, completion, label) in &corpus {
        let task = bases[*i].example.query.task;
        let got = format_reward(completion, task, FormatMode::Strict);
        ensure!(got == *label, "{} ({task}): got {got}, labeled {label}: {completion:?}", MUTATIONS[*kind].0);
        per_label[*label as usize] += 1;
        // Tag checks alone ignore the answer grammar.
        let tags_ok = !matches!(kind, 1 | 2 | 3 | 7 | 8);
        ensure!(format_reward(completion, task, FormatMode::TagsOnly) == u8::from(tags_ok), "tags-only {completion:?}");
    }
    Ok(format!(
        "3 templates plus thinking wrapper round-trip bit-exactly; 500 mutations match labels ({} rewarded, {} zero)",
        per_label[1], per_label[0]
    ))
}

// 6

fn c6_few_shot() -> Outcome {
    let pool: Vec<SceneRecord> = generate_instances(&GenSpec { seed: 6, count: 520, ..GenSpec::default() })
        .iter()
        .map(SceneRecord::from_instance)
        .collect();
    let cfg = |shots, seed| FewShotConfig { shots, categories: vec![], seed, nesting: true };
    let picked = few_shot_sample(&pool, &cfg(10, 0)).map_err(|e| e.to_string())?;
    let cats: BTreeSet<&str> = picked.iter().map(|&i| pool[i].category.as_str()).collect();
    ensure!(picked.len() == 260 && cats.len() == 26, "{} records over {} categories", picked.len(), cats.len());

    let mut rng = rng_for(6, 6);
    for p in 0..100u64 {
        let spec = GenSpec {
            seed: 100 + p,
            count: rng.random_range(26..=400),
            categories: rng.random_range(1..=26),
            ..GenSpec::default()
        };
        let pool: Vec<SceneRecord> = generate_instances(&spec).iter().map(SceneRecord::from_instance).collect();
        let seed = rng.random();
        let sets: Vec<HashSet<String>> = [1, 5, 10]
            .iter()
            .map(|&k| {
                few_shot_sample(&pool, &cfg(k, seed))
                    .map(|idx| idx.into_iter().map(|i| pool[i].id.clone()).collect())
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        ensure!(sets[0].is_subset(&sets[1]) && sets[1].is_subset(&sets[2]), "pool {p}: nesting broken");
    }
    Ok("260 records over 26 categories at K=10; 1 ⊆ 5 ⊆ 10 on 100 random pools".into())
}

// 7

fn rec_config(seed: u64, algorithm: Algorithm, shots: usize) -> RunConfig {
    let mut cfg = RunConfig { seed, algorithm, ..RunConfig::default() };
    cfg.data.train_gen.seed = seed;
    cfg.data.shots = Some(shots);
    cfg
}

fn trainer(cfg: &RunConfig) -> Result<Trainer, String> {
    let (train, eval) = load_instances(cfg).map_err(|e| e.to_string())?;
    Trainer::new(cfg.clone(), train, eval).map_err(|e| e.to_string())
}

fn mean_iou(t: &Trainer) -> Result<f64, String> {
    Ok(t.evaluate().map_err(|e| e.to_string())?.overall["mean_iou"])
}

fn c7_training() -> Outcome {
    let mut cfg = rec_config(0, Algorithm::Grpo, 10);
    cfg.early_stopping.enabled = false;
    let start = Instant::now();
    let (train, eval) = load_instances(&cfg).map_err(|e| e.to_string())?;
    ensure!(train.len() == 260, "10-shot set has {} records", train.len());
    let mut t = Trainer::new(cfg.clone(), train, eval).map_err(|e| e.to_string())?;
    let baseline = mean_iou(&t)?;
    ensure!(baseline <= 0.30, "baseline {baseline}");
    let mut reached = None;
    while t.step_count() < 1000 {
        t.step().map_err(|e| e.to_string())?;
        if reached.is_none() && t.step_count() % 50 == 0 && mean_iou(&t)? >= 0.70 {
            reached = Some(t.step_count());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let last = mean_iou(&t)?;
    let reached = reached.ok_or(format!("mean IoU {last} after 1000 updates"))?;
    ensure!(secs < 300.0, "took {secs:.1}s");

    let mut again = trainer(&cfg)?;
    again.run().map_err(|e| e.to_string())?;
    let bits = |p: &ToyPolicy| p.params.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure!(bits(again.policy()) == bits(t.policy()), "parameters differ between runs");
    ensure!(again.diagnostics() == t.diagnostics(), "diagnostics differ between runs");
    Ok(format!(
        "greedy mean IoU {baseline:.3} -> {last:.3}; >= 0.70 by update {reached}; {secs:.2}s; rerun bit-identical"
    ))
}

// 8

/// Mean reward under sampling: format plus expected IoU over the policy.
fn sampled_reward(policy: &ToyPolicy, instances: &[Instance]) -> f64 {
    let total: f64 = instances
        .iter()
        .map(|inst| {
            let ctx = inst.context();
            policy
                .probs(&ctx)
                .iter()
                .zip(&ctx.candidates)
                .map(|(p, c)| p * (1.0 + answer_metrics(&c.answer, &inst.example.ground_truth, &BoxSegmenter, &()).unwrap()))
                .sum::<f64>()
        })
        .sum();
    total / instances.len() as f64
}

fn c8_grpo_vs_sft() -> Outcome {
    let mut wins = 0;
    let mut ties = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut finals = Vec::new();
        for algorithm in [Algorithm::Grpo, Algorithm::Sft] {
            let mut t = trainer(&rec_config(seed, algorithm, 1))?;
            t.run().map_err(|e| e.to_string())?;
            let eval = load_instances(&rec_config(seed, algorithm, 1)).map_err(|e| e.to_string())?.1;
            finals.push((mean_iou(&t)?, sampled_reward(t.policy(), &eval)));
        }
        let (g, s) = (finals[0], finals[1]);
        if g.0 >= s.0 {
            wins += 1;
        }
        if g.0 == s.0 {
            ties += 1;
        }
        lines.push(format!("seed {seed} greedy {:+.3} sampled {:+.3}", g.0 - s.0, g.1 - s.1));
    }
    ensure!(wins >= 4, "GRPO >= SFT on {wins}/5 seeds; {}", lines.join("; "));
    Ok(format!(
        "GRPO >= SFT greedy mean IoU on {wins}/5 seeds ({ties} exact ties); GRPO-SFT gaps: {}",
        lines.join("; ")
    ))
}

// 9

fn c9_cross_eval() -> Outcome {
    let shifted = SourceSpec {
        name: "shifted".into(),
        spec: GenSpec { seed: 2_000_003, count: 260, profile: Profile::Shifted, ..GenSpec::default() },
    };
    let taus = [0.5];
    let baseline = cross_eval(&shifted, &shifted, &ToyPolicy::zeros(1.0), &taus).map_err(|e| e.to_string())?;
    let base_iou = baseline.report.overall["mean_iou"];
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let cfg = rec_config(seed, Algorithm::Grpo, 10);
        let mut t = trainer(&cfg)?;
        t.run().map_err(|e| e.to_string())?;
        let base = SourceSpec { name: "base".into(), spec: cfg.data.train_gen };
        let r = cross_eval(&base, &shifted, t.policy(), &taus).map_err(|e| e.to_string())?;
        let iou = r.report.overall["mean_iou"];
        ensure!(iou > base_iou, "seed {seed}: {iou} vs untrained {base_iou}");
        lines.push(format!("{iou:.3}"));
    }
    Ok(format!("shifted mean IoU untrained {base_iou:.3}, trained [{}]", lines.join(", ")))
}

// 10

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/schemas").join(format!("{name}.schema.json"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn validate(v: &jsonschema::Validator, name: &str, value: &Value) -> Result<(), String> {
    let errors: Vec<String> = v.iter_errors(value).map(|e| e.to_string()).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(format!("{name}: {}", errors.join("; ")))
    }
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn resume_cfg(out: PathBuf, steps: u64) -> RunConfig {
    let mut cfg = rec_config(0, Algorithm::Grpo, 10);
    cfg.steps = steps;
    cfg.checkpoint_every = 100;
    cfg.eval_every = 50;
    cfg.early_stopping.enabled = false;
    cfg.out_dir = out;
    cfg
}

/// Score requests built from toy instances: the labeled mutation corpus plus
/// sampled completions with tag faults over all three tasks.
fn score_corpus() -> Vec<Vec<u8>> {
    let request = |inst: &Instance, completion: String| ScoreRequest {
        task: inst.example.query.task,
        completion,
        ground_truth: ScoreGroundTruth {
            targets: SceneRecord::from_instance(inst).targets,
            scene: (inst.example.query.task == Task::Gres).then(|| inst.scene.clone()),
            canvas: None,
        },
        weights: None,
        format_mode: None,
    };
    let mut bodies = Vec::new();
    let bases = mutation_bases();
    for (i, _, completion, _) in mutation_corpus(&bases) {
        bodies.push(serde_json::to_vec(&request(&bases[i], completion)).unwrap());
    }
    let policy = ToyPolicy::new(vec![0.5, 1.0, -0.5, 0.0, 0.3, -1.0, 0.2, 0.0, -0.4], 1.0).unwrap();
    let mut rng = rng_for(10, 10);
    for (task, seed) in [(Task::Rec, 60), (Task::Ovd, 61), (Task::Gres, 62)] {
        for inst in generate_instances(&GenSpec { seed, task, count: 30, difficulty: 3, ..GenSpec::default() }) {
            let ctx = inst.context();
            for _ in 0..3 {
                let (_, completion) =
                    policy.sample_completion(&ctx, &inst.example.query, inst.scene.objects.len(), &mut rng, 0.3);
                bodies.push(serde_json::to_vec(&request(&inst, completion)).unwrap());
            }
        }
    }
    bodies.push(b"{not json".to_vec());
    bodies.push(br#"{"task":"rec","completion":"x","ground_truth":{"targets":[]}}"#.to_vec());
    bodies.push(
        br#"{"task":"ovd","completion":"x","ground_truth":{"targets":[]},"weights":{"format":-1,"metrics":1}}"#.to_vec(),
    );
    bodies
}

async fn call(method: &str, uri: &str, body: Vec<u8>) -> (u16, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = router().oneshot(req).await.unwrap();
    let status = resp.status().as_u16();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn c10_operational() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    run_training(&resume_cfg(full.clone(), 200), None).map_err(|e| e.to_string())?;
    run_training(&resume_cfg(split.clone(), 100), None).map_err(|e| e.to_string())?;
    run_training(&resume_cfg(split.clone(), 200), Some(&checkpoint_path(&split, 100))).map_err(|e| e.to_string())?;
    for f in ["latest.json", "checkpoint-000200.json", "diagnostics.jsonl", "eval.jsonl"] {
        let (a, b) = (std::fs::read(full.join(f)).unwrap(), std::fs::read(split.join(f)).unwrap());
        ensure!(a == b, "{f} differs between 200 and 100+100");
    }
    let ckpt = Checkpoint::load(&full.join("latest.json")).map_err(|e| e.to_string())?;
    ensure!(ckpt.step == 200, "checkpoint at step {}", ckpt.step);

    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let (v_req, v_resp, v_err, v_health) =
        (schema("score_request"), schema("reward_breakdown"), schema("error"), schema("health"));
    let corpus = score_corpus();
    let mut validated = 0;
    for body in &corpus {
        let (status, served) = rt.block_on(call("POST", "/v1/score", body.clone()));
        match score_json(body) {
            Ok(b) => {
                ensure!(status == 200, "status {status} for a valid request");
                let lib = serde_json::to_value(b).unwrap();
                ensure!(served == lib, "service {served} vs library {lib}");
                validate(&v_req, "score request", &serde_json::from_slice(body).unwrap())?;
                validate(&v_resp, "reward breakdown", &served)?;
                validated += 2;
            }
            Err(e) => {
                ensure!(status == 400 && served["reason"] == e.reason(), "error case: {status} {served}");
                validate(&v_err, "error", &served)?;
                validated += 1;
            }
        }
    }
    let (status, health) = rt.block_on(call("GET", "/v1/health", vec![]));
    ensure!(status == 200, "health status {status}");
    validate(&v_health, "health", &health)?;

    let v_ckpt = schema("checkpoint");
    for f in ["latest.json", "checkpoint-000100.json", "checkpoint-000200.json"] {
        validate(&v_ckpt, f, &serde_json::from_slice(&std::fs::read(full.join(f)).unwrap()).unwrap())?;
    }
    let v_diag = schema("diagnostics");
    let diags = jsonl(&full.join("diagnostics.jsonl"));
    for d in &diags {
        validate(&v_diag, "diagnostics line", d)?;
    }
    let v_eval_line = schema("eval_line");
    let evals = jsonl(&full.join("eval.jsonl"));
    for e in &evals {
        validate(&v_eval_line, "eval line", e)?;
    }
    let v_report = schema("eval_report");
    let v_record = schema("scene_record");
    let policy = ToyPolicy::new(ckpt.params.clone(), ckpt.temperature).unwrap();
    let mut records = 0;
    for task in [Task::Rec, Task::Ovd, Task::Gres] {
        let inst = generate_instances(&GenSpec { seed: 70, task, count: 20, negative_rate: 0.2, ..GenSpec::default() });
        for i in &inst {
            validate(&v_record, "scene record", &serde_json::to_value(SceneRecord::from_instance(i)).unwrap())?;
            records += 1;
        }
        let report = evaluate_policy(&policy, &inst, &[0.5, 0.7]).map_err(|e| e.to_string())?;
        validate(&v_report, "eval report", &serde_json::to_value(&report).unwrap())?;
    }
    Ok(format!(
        "200 == 100+100 byte-identical; {} requests service == library; {} documents valid \
         ({validated} score, 1 health, 3 checkpoints, {} diagnostics, {} eval lines, {records} records, 3 reports)",
        corpus.len(),
        validated + 1 + 3 + diags.len() + evals.len() + records + 3,
        diags.len(),
        evals.len()
    ))
}
