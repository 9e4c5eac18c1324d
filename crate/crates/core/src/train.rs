//! Training loop for the toy policy: GRPO, DAPO or the supervised baseline.
//!
//! Each step draws `batch_groups` training queries, samples a group of
//! completions per query from the current policy, scores them with the
//! verifiable reward and applies the configured update. All randomness
//! comes from one ChaCha8 stream, so a run is a pure function of its config
//! and resuming from a checkpoint continues it bit-exactly.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError, ParamDescriptor, RngState, DIAGNOSTICS_TAIL, FORMAT_VERSION};
use crate::config::{Algorithm, ConfigError, RunConfig};
use crate::dataset::{read_jsonl, DataError, SceneRecord};
use crate::evalkit::{evaluate_policy, few_shot_sample, EvalError, EvalReport, FewShotConfig};
use crate::grpo::{self, DifferentiablePolicy, GrpoConfig, GrpoError, Group, Rollout, StepDiagnostics};
use crate::rewards::{reward, RewardError};
use crate::structured_output::Task;
use crate::toy::{generate_instances, Instance, ToyContext, ToyPolicy, ToySegmenter, FEATURE_DIM, FEATURE_NAMES};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training and evaluation instances for a config.
pub fn load_instances(cfg: &RunConfig) -> Result<(Vec<Instance>, Vec<Instance>), TrainError> {
    let train_records: Option<Vec<SceneRecord>> = cfg.data.train.as_deref().map(read_jsonl).transpose()?;
    let mut train = match train_records {
        Some(recs) => {
            let recs = match cfg.data.shots {
                Some(k) => {
                    let fs = FewShotConfig {
                        shots: k,
                        categories: vec![],
                        seed: cfg.seed,
                        nesting: true,
                    };
                    let idx = few_shot_sample(&recs, &fs)?;
                    idx.into_iter().map(|i| recs[i].clone()).collect()
                }
                None => recs,
            };
            recs.iter().map(SceneRecord::to_instance).collect::<Result<Vec<_>, _>>()?
        }
        None => generate_instances(&cfg.data.train_gen),
    };
    if cfg.data.train.is_none() {
        if let Some(k) = cfg.data.shots {
            let recs: Vec<SceneRecord> = train.iter().map(SceneRecord::from_instance).collect();
            let fs = FewShotConfig {
                shots: k,
                categories: vec![],
                seed: cfg.seed,
                nesting: true,
            };
            let idx = few_shot_sample(&recs, &fs)?;
            train = idx.into_iter().map(|i| train[i].clone()).collect();
        }
    }
    let eval = match cfg.data.eval.as_deref() {
        Some(p) => read_jsonl(p)?
            .iter()
            .map(SceneRecord::to_instance)
            .collect::<Result<Vec<_>, _>>()?,
        None => generate_instances(&cfg.data.eval_gen),
    };
    if train.is_empty() {
        return Err(TrainError::Invalid("training set is empty".into()));
    }
    let task = train[0].example.query.task;
    if let Some(bad) = train.iter().chain(&eval).find(|i| i.example.query.task != task) {
        return Err(TrainError::Invalid(format!(
            "mixed tasks: {} and {} ({})",
            task, bad.example.query.task, bad.id
        )));
    }
    Ok((train, eval))
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub early_stopped: bool,
    pub final_eval: Option<EvalReport>,
}

pub struct Trainer {
    cfg: RunConfig,
    grpo: GrpoConfig,
    digest: String,
    task: Task,
    train: Vec<Instance>,
    contexts: Vec<ToyContext>,
    eval: Vec<Instance>,
    policy: ToyPolicy,
    reference: ToyPolicy,
    rng: ChaCha8Rng,
    step: u64,
    reward_history: Vec<f64>,
    diagnostics: Vec<StepDiagnostics>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, train: Vec<Instance>, eval: Vec<Instance>) -> Result<Self, TrainError> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::Invalid("training set is empty".into()));
        }
        let task = train[0].example.query.task;
        let contexts: Vec<ToyContext> = train.iter().map(Instance::context).collect();
        for (inst, ctx) in train.iter().zip(&contexts) {
            if ctx.index_of(&inst.example.answer).is_none() {
                return Err(TrainError::Invalid(format!("{}: reference answer is not a candidate", inst.id)));
            }
        }
        let policy = ToyPolicy::new(vec![0.0; FEATURE_DIM], cfg.temperature)
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(7);
        Ok(Self {
            grpo: cfg.grpo_config(),
            digest: cfg.digest(),
            task,
            reference: policy.clone(),
            policy,
            rng,
            train,
            contexts,
            eval,
            cfg,
            step: 0,
            reward_history: Vec::new(),
            diagnostics: Vec::new(),
        })
    }

    /// Continues from a checkpoint written under the same config.
    pub fn resume(cfg: RunConfig, train: Vec<Instance>, eval: Vec<Instance>, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        ckpt.validate()?;
        let mut t = Self::new(cfg, train, eval)?;
        if ckpt.config_digest != t.digest {
            return Err(CheckpointError::ConfigMismatch {
                expected: t.digest.clone(),
                found: ckpt.config_digest.clone(),
            }
            .into());
        }
        if ckpt.task != t.task {
            return Err(TrainError::Invalid(format!(
                "checkpoint was trained on {}, data is {}",
                ckpt.task, t.task
            )));
        }
        if ckpt.descriptor.dim != FEATURE_DIM {
            return Err(CheckpointError::Dimension {
                expected: FEATURE_DIM,
                got: ckpt.descriptor.dim,
            }
            .into());
        }
        t.policy.params = ckpt.params.clone();
        t.reference.params = ckpt.reference_params.clone();
        t.rng = ckpt.rng.restore()?;
        t.step = ckpt.step;
        t.reward_history = ckpt.reward_history.clone();
        t.diagnostics = ckpt.diagnostics_tail.clone();
        Ok(t)
    }

    pub fn policy(&self) -> &ToyPolicy {
        &self.policy
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics] {
        &self.diagnostics
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let tail_start = self.diagnostics.len().saturating_sub(DIAGNOSTICS_TAIL);
        Checkpoint {
            format_version: FORMAT_VERSION,
            step: self.step,
            task: self.task,
            descriptor: ParamDescriptor {
                dim: FEATURE_DIM,
                names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            },
            params: self.policy.params.clone(),
            reference_params: self.reference.params.clone(),
            temperature: self.policy.temperature,
            rng: RngState::capture(&self.rng),
            config_digest: self.digest.clone(),
            reward_history: self.reward_history.clone(),
            diagnostics_tail: self.diagnostics[tail_start..].to_vec(),
        }
    }

    fn sample_group(&mut self, idx: usize) -> Result<Group, TrainError> {
        let inst = &self.train[idx];
        let ctx = &self.contexts[idx];
        let n_objects = inst.scene.objects.len();
        let mut rollouts = Vec::with_capacity(self.grpo.group_size);
        for _ in 0..self.grpo.group_size {
            let (action, completion) =
                self.policy
                    .sample_completion(ctx, &inst.example.query, n_objects, &mut self.rng, self.cfg.fault_rate);
            let r = reward(&completion, &inst.example.ground_truth, &ToySegmenter, &inst.scene, &self.cfg.rewards)?;
            let lp = self.policy.log_prob(ctx, action);
            rollouts.push(Rollout {
                action,
                completion,
                logp_current: lp,
                logp_old: lp,
                logp_ref: self.reference.log_prob(ctx, action),
                reward: r.total,
            });
        }
        Ok(Group::new(inst.id.clone(), rollouts))
    }

    /// One update. Returns the step's diagnostics.
    pub fn step(&mut self) -> Result<StepDiagnostics, TrainError> {
        let next = self.step + 1;
        let batch: Vec<usize> = (0..self.cfg.batch_groups)
            .map(|_| self.rng.random_range(0..self.train.len()))
            .collect();
        let mut groups = Vec::with_capacity(batch.len());
        for &i in &batch {
            groups.push(self.sample_group(i)?);
        }
        let diag = match self.cfg.algorithm {
            Algorithm::Sft => {
                let rewards: Vec<f64> = groups.iter().flat_map(Group::rewards).collect();
                let kls: Vec<f64> = groups
                    .iter()
                    .flat_map(|g| g.rollouts.iter().map(|r| grpo::k3(r.logp_current, r.logp_ref)))
                    .collect();
                let mut objective = 0.0;
                for _ in 0..self.cfg.inner_steps {
                    objective = 0.0;
                    let mut grad = [0.0; FEATURE_DIM];
                    for &i in &batch {
                        let ctx = &self.contexts[i];
                        let target = ctx.index_of(&self.train[i].example.answer).expect("checked at construction");
                        let (lp, g) = self.policy.log_prob_and_grad(ctx, target);
                        objective += lp / batch.len() as f64;
                        for (acc, gi) in grad.iter_mut().zip(&g) {
                            *acc += gi / batch.len() as f64;
                        }
                    }
                    if let Some((index, value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
                        return Err(GrpoError::NonFiniteGradient { step: next, index, value: *value }.into());
                    }
                    for (p, g) in self.policy.params.iter_mut().zip(&grad) {
                        *p += self.grpo.learning_rate * g;
                    }
                }
                StepDiagnostics {
                    step: next,
                    objective,
                    mean_reward: grpo::mean(&rewards),
                    mean_kl: grpo::mean(&kls),
                    clip_frac: 0.0,
                    filtered_groups: 0,
                }
            }
            Algorithm::Grpo | Algorithm::Dapo => {
                let contexts: Vec<ToyContext> = batch.iter().map(|&i| self.contexts[i].clone()).collect();
                let mut diag = None;
                for _ in 0..self.cfg.inner_steps {
                    let d = grpo::policy_step(&mut self.policy, &self.reference, &groups, &contexts, &self.grpo, next)?;
                    diag.get_or_insert(d);
                }
                diag.expect("inner_steps >= 1")
            }
        };
        self.step = next;
        self.reward_history.push(diag.mean_reward);
        self.diagnostics.push(diag.clone());
        Ok(diag)
    }

    /// Windowed mean reward improved by less than `min_delta` over the last
    /// two windows.
    pub fn should_stop(&self) -> bool {
        let es = &self.cfg.early_stopping;
        let h = &self.reward_history;
        if !es.enabled || h.len() < 2 * es.window {
            return false;
        }
        let w = es.window;
        let prev = grpo::mean(&h[h.len() - 2 * w..h.len() - w]);
        let cur = grpo::mean(&h[h.len() - w..]);
        cur - prev < es.min_delta
    }

    pub fn evaluate(&self) -> Result<EvalReport, TrainError> {
        Ok(evaluate_policy(&self.policy, &self.eval, &self.cfg.taus)?)
    }

    /// Runs until `cfg.steps` updates in total (or early stop), without I/O.
    pub fn run(&mut self) -> Result<bool, TrainError> {
        while self.step < self.cfg.steps {
            self.step()?;
            if self.should_stop() {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<(), TrainError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{}", serde_json::to_string(value).expect("serializes")).map_err(io_err(path))
}

/// Drops diagnostics lines past `step` so a resumed run appends cleanly.
fn truncate_jsonl(path: &Path, step: u64) -> Result<(), TrainError> {
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut kept = String::new();
    for line in reader.lines() {
        let line = line.map_err(io_err(path))?;
        let s = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
        if s.is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(io_err(path))
}

#[derive(Serialize)]
struct EvalLine<'a> {
    step: u64,
    report: &'a EvalReport,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint-{step:06}.json"))
}

/// Full run with file outputs in `cfg.out_dir`: `diagnostics.jsonl`,
/// `eval.jsonl`, periodic `checkpoint-NNNNNN.json` and `latest.json`.
/// All inputs are loaded and validated before anything is written.
pub fn run_training(cfg: &RunConfig, resume_from: Option<&Path>) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    let (train, eval) = load_instances(cfg)?;
    let ckpt = resume_from.map(Checkpoint::load).transpose()?;
    let mut trainer = match &ckpt {
        Some(c) => Trainer::resume(cfg.clone(), train, eval, c)?,
        None => Trainer::new(cfg.clone(), train, eval)?,
    };

    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let diag_path = out.join("diagnostics.jsonl");
    let eval_path = out.join("eval.jsonl");
    match &ckpt {
        Some(c) => {
            truncate_jsonl(&diag_path, c.step)?;
            truncate_jsonl(&eval_path, c.step)?;
        }
        None => {
            for p in [&diag_path, &eval_path] {
                std::fs::write(p, "").map_err(io_err(p))?;
            }
        }
    }

    let mut early_stopped = false;
    while trainer.step_count() < cfg.steps {
        let d = trainer.step()?;
        append_line(&diag_path, &d)?;
        let s = trainer.step_count();
        if cfg.eval_every > 0 && s % cfg.eval_every == 0 {
            append_line(&eval_path, &EvalLine { step: s, report: &trainer.evaluate()? })?;
        }
        if cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(&checkpoint_path(out, s))?;
        }
        if trainer.should_stop() {
            early_stopped = true;
            break;
        }
    }
    trainer.checkpoint().save(&out.join("latest.json"))?;
    let final_eval = if trainer.eval.is_empty() { None } else { Some(trainer.evaluate()?) };
    Ok(TrainSummary {
        steps: trainer.step_count(),
        early_stopped,
        final_eval,
    })
}
