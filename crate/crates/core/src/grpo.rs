//! Group-relative policy optimization.
//!
//! For a group of `N` completions sampled for the same query, rewards are
//! standardized into advantages `A_i = (r_i - mean) / (std + eps)` using the
//! population standard deviation. The policy maximizes
//!
//! ```text
//! J = 1/N * sum_i [ min(c1_i * A_i, c2_i * A_i) - beta * KL_i ]
//! c1_i = exp(logp_current_i - logp_old_i),   c2_i = clip(c1_i, 1 - eps_low, 1 + eps_high)
//! ```
//!
//! averaged over the groups of a batch. Ratios are sequence-level. KL is the
//! k3 estimator `x - ln x - 1` with `x = pi_ref / pi_theta` evaluated at the
//! sampled completion, or the exact divergence for policies that can enumerate
//! their output space.
//!
//! The DAPO variant decouples the clip range (`eps_high > eps_low`), drops
//! groups whose rewards are all equal, and defaults to `beta = 0`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group {query_id:?} has {n} rollouts; at least 2 are required")]
    GroupTooSmall { query_id: String, n: usize },
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
    #[error("got {groups} groups but {contexts} contexts")]
    ContextMismatch { groups: usize, contexts: usize },
    #[error("exact KL requested but the policy cannot enumerate its outputs")]
    ExactKlUnavailable,
    #[error("non-finite gradient component {index} ({value}) at step {step}; update aborted")]
    NonFiniteGradient { step: u64, index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Grpo,
    Dapo,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    #[default]
    Estimator,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps_low: f64,
    pub clip_eps_high: f64,
    pub kl_beta: f64,
    pub std_epsilon: f64,
    pub learning_rate: f64,
    pub variant: Variant,
    pub kl_mode: KlMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps_low: 0.2,
            clip_eps_high: 0.2,
            kl_beta: 0.04,
            std_epsilon: 1e-6,
            learning_rate: 0.05,
            variant: Variant::Grpo,
            kl_mode: KlMode::Estimator,
        }
    }
}

impl GrpoConfig {
    /// Decoupled clipping (0.2 / 0.28), uniform-group filtering, no KL term.
    pub fn dapo() -> Self {
        Self {
            clip_eps_high: 0.28,
            kl_beta: 0.0,
            variant: Variant::Dapo,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let fail = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_eps_low > 0.0 && self.clip_eps_low <= self.clip_eps_high) {
            return fail("clip epsilons must satisfy 0 < clip_eps_low <= clip_eps_high");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return fail("kl_beta must be finite and non-negative");
        }
        if self.std_epsilon.is_nan() || self.std_epsilon <= 0.0 {
            return fail("std_epsilon must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        Ok(())
    }

    /// Lower and upper clip offsets. GRPO clips symmetrically with `clip_eps_low`.
    pub fn clip_bounds(&self) -> (f64, f64) {
        match self.variant {
            Variant::Grpo => (1.0 - self.clip_eps_low, 1.0 + self.clip_eps_low),
            Variant::Dapo => (1.0 - self.clip_eps_low, 1.0 + self.clip_eps_high),
        }
    }
}

/// One sampled completion with its log-probabilities (nats) and reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// Index of the completion in the policy's output space.
    pub action: usize,
    pub completion: String,
    pub logp_current: f64,
    pub logp_old: f64,
    pub logp_ref: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub query_id: String,
    pub rollouts: Vec<Rollout>,
    pub advantages: Option<Vec<f64>>,
}

impl Group {
    pub fn new(query_id: impl Into<String>, rollouts: Vec<Rollout>) -> Self {
        Self {
            query_id: query_id.into(),
            rollouts,
            advantages: None,
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Standardized group advantages. Groups whose rewards are all identical get
/// all-zero advantages.
pub fn compute_advantages(group: &Group, cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    let rewards = group.rewards();
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall {
            query_id: group.query_id.clone(),
            n: rewards.len(),
        });
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let m = mean(&rewards);
    let denom = population_std(&rewards) + cfg.std_epsilon;
    Ok(rewards.iter().map(|r| (r - m) / denom).collect())
}

/// k3 estimator of KL(pi_theta || pi_ref) at one sample; always non-negative.
pub fn k3(logp_current: f64, logp_ref: f64) -> f64 {
    let log_x = logp_ref - logp_current;
    // exp_m1 keeps precision when the two log-probabilities are close.
    (log_x.exp_m1() - log_x).max(0.0)
}

/// Exact KL between two distributions given as log-probability vectors.
pub fn exact_kl(logp: &[f64], logp_ref: &[f64]) -> f64 {
    logp.iter()
        .zip(logp_ref)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

/// KL term of one rollout. Exact mode needs the full distributions.
pub fn kl_divergence(rollout: &Rollout, mode: KlMode, distributions: Option<(&[f64], &[f64])>) -> Result<f64, GrpoError> {
    match mode {
        KlMode::Estimator => Ok(k3(rollout.logp_current, rollout.logp_ref)),
        KlMode::Exact => distributions
            .map(|(p, q)| exact_kl(p, q))
            .ok_or(GrpoError::ExactKlUnavailable),
    }
}

/// Clipped surrogate of one rollout: value, derivative with respect to
/// `logp_current`, and whether the clipped branch was selected.
fn clipped_term(logp_current: f64, logp_old: f64, advantage: f64, bounds: (f64, f64)) -> (f64, f64, bool) {
    let c1 = (logp_current - logp_old).exp();
    let c2 = c1.clamp(bounds.0, bounds.1);
    let (u, v) = (c1 * advantage, c2 * advantage);
    if u <= v {
        (u, u, false)
    } else {
        (v, 0.0, true)
    }
}

fn advantages_of(group: &Group, cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    match &group.advantages {
        Some(a) if a.len() == group.rollouts.len() => Ok(a.clone()),
        _ => compute_advantages(group, cfg),
    }
}

/// Surrogate objective of one group from its stored log-probabilities, with
/// the k3 estimator as KL term.
pub fn surrogate_objective(group: &Group, cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    let adv = advantages_of(group, cfg)?;
    let bounds = cfg.clip_bounds();
    let total: f64 = group
        .rollouts
        .iter()
        .zip(&adv)
        .map(|(r, a)| {
            let (s, _, _) = clipped_term(r.logp_current, r.logp_old, *a, bounds);
            s - cfg.kl_beta * k3(r.logp_current, r.logp_ref)
        })
        .sum();
    Ok(total / group.rollouts.len() as f64)
}

/// Group with reward spread (population std) below `std_epsilon`.
pub fn is_uniform(group: &Group, std_epsilon: f64) -> bool {
    population_std(&group.rewards()) < std_epsilon
}

/// Drops uniform-reward groups, preserving order. Returns the kept groups and
/// the number filtered out.
pub fn dapo_filter(groups: Vec<Group>, std_epsilon: f64) -> (Vec<Group>, usize) {
    let before = groups.len();
    let kept: Vec<Group> = groups.into_iter().filter(|g| !is_uniform(g, std_epsilon)).collect();
    let filtered = before - kept.len();
    (kept, filtered)
}

/// A policy whose sequence log-probabilities are differentiable in a flat
/// parameter vector.
pub trait DifferentiablePolicy {
    type Context;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// `log pi(action | ctx)` and its gradient with respect to the parameters.
    fn log_prob_and_grad(&self, ctx: &Self::Context, action: usize) -> (f64, Vec<f64>);

    fn log_prob(&self, ctx: &Self::Context, action: usize) -> f64 {
        self.log_prob_and_grad(ctx, action).0
    }

    /// Exact `KL(self || reference)` over the full output space and its
    /// gradient, when the output space is enumerable.
    fn exact_kl_and_grad(&self, _reference: &Self, _ctx: &Self::Context) -> Option<(f64, Vec<f64>)> {
        None
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_kl: f64,
    pub clip_frac: f64,
}

/// Batch objective (mean over groups) recomputed at the policy's current
/// parameters, and its gradient.
pub fn objective_and_gradient<P: DifferentiablePolicy>(
    policy: &P,
    reference: &P,
    groups: &[Group],
    contexts: &[P::Context],
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<f64>, StepStats), GrpoError> {
    if groups.len() != contexts.len() {
        return Err(GrpoError::ContextMismatch {
            groups: groups.len(),
            contexts: contexts.len(),
        });
    }
    let groups: Vec<&Group> = groups.iter().collect();
    let contexts: Vec<&P::Context> = contexts.iter().collect();
    objective_and_gradient_refs(policy, reference, &groups, &contexts, cfg)
}

fn objective_and_gradient_refs<P: DifferentiablePolicy>(
    policy: &P,
    reference: &P,
    groups: &[&Group],
    contexts: &[&P::Context],
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<f64>, StepStats), GrpoError> {
    let dim = policy.params().len();
    let mut grad = vec![0.0; dim];
    if groups.is_empty() {
        return Ok((0.0, grad, StepStats::default()));
    }
    let bounds = cfg.clip_bounds();
    let beta = cfg.kl_beta;
    let (mut objective, mut kl_sum, mut clipped, mut count) = (0.0, 0.0, 0usize, 0usize);
    let group_weight = 1.0 / groups.len() as f64;

    for (group, ctx) in groups.iter().zip(contexts) {
        let adv = advantages_of(group, cfg)?;
        let w = group_weight / group.rollouts.len() as f64;
        let exact = match cfg.kl_mode {
            KlMode::Exact => Some(
                policy
                    .exact_kl_and_grad(reference, ctx)
                    .ok_or(GrpoError::ExactKlUnavailable)?,
            ),
            KlMode::Estimator => None,
        };
        for (r, a) in group.rollouts.iter().zip(&adv) {
            let (lp, glp) = policy.log_prob_and_grad(ctx, r.action);
            let (s, ds, was_clipped) = clipped_term(lp, r.logp_old, *a, bounds);
            clipped += usize::from(was_clipped);
            count += 1;
            match &exact {
                Some((kl, gkl)) => {
                    objective += w * (s - beta * kl);
                    kl_sum += kl;
                    for k in 0..dim {
                        grad[k] += w * (ds * glp[k] - beta * gkl[k]);
                    }
                }
                None => {
                    let kl = k3(lp, r.logp_ref);
                    // d k3 / d logp_current = 1 - pi_ref / pi_theta
                    let dkl = -(r.logp_ref - lp).exp_m1();
                    objective += w * (s - beta * kl);
                    kl_sum += kl;
                    let coef = w * (ds - beta * dkl);
                    for k in 0..dim {
                        grad[k] += coef * glp[k];
                    }
                }
            }
        }
    }
    let stats = StepStats {
        mean_kl: kl_sum / count as f64,
        clip_frac: clipped as f64 / count as f64,
    };
    Ok((objective, grad, stats))
}

/// Per-step diagnostics, emitted as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDiagnostics {
    pub step: u64,
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub filtered_groups: usize,
}

/// One gradient-ascent step on the surrogate objective.
///
/// `step` is only used for diagnostics. With the DAPO variant, uniform-reward
/// groups are dropped before the update. `mean_reward` covers every input group.
pub fn policy_step<P: DifferentiablePolicy>(
    policy: &mut P,
    reference: &P,
    groups: &[Group],
    contexts: &[P::Context],
    cfg: &GrpoConfig,
    step: u64,
) -> Result<StepDiagnostics, GrpoError> {
    cfg.validate()?;
    if groups.len() != contexts.len() {
        return Err(GrpoError::ContextMismatch {
            groups: groups.len(),
            contexts: contexts.len(),
        });
    }
    let all_rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
    let mean_reward = if all_rewards.is_empty() { 0.0 } else { mean(&all_rewards) };

    let kept: Vec<usize> = match cfg.variant {
        Variant::Dapo => (0..groups.len())
            .filter(|&i| !is_uniform(&groups[i], cfg.std_epsilon))
            .collect(),
        Variant::Grpo => (0..groups.len()).collect(),
    };
    let filtered_groups = groups.len() - kept.len();
    let sub_groups: Vec<&Group> = kept.iter().map(|&i| &groups[i]).collect();
    let sub_ctx: Vec<&P::Context> = kept.iter().map(|&i| &contexts[i]).collect();
    let (objective, grad, stats) = objective_and_gradient_refs(policy, reference, &sub_groups, &sub_ctx, cfg)?;

    if let Some((index, value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(GrpoError::NonFiniteGradient {
            step,
            index,
            value: *value,
        });
    }
    for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
        *p += cfg.learning_rate * g;
    }
    Ok(StepDiagnostics {
        step,
        objective,
        mean_reward,
        mean_kl: stats.mean_kl,
        clip_frac: stats.clip_frac,
        filtered_groups,
    })
}
