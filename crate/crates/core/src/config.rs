//! TOML run configuration.
//!
//! ```toml
//! seed = 0
//! algorithm = "grpo"      # grpo | dapo | sft
//! steps = 1000
//! batch_groups = 4
//! out_dir = "runs/rec"
//!
//! [grpo]                  # unset fields take the algorithm's preset
//! learning_rate = 0.05
//!
//! [rewards]
//! weights = { format = 1.0, metrics = 1.0 }
//!
//! [data]
//! train = "train.jsonl"   # or generate with [data.train_gen]
//! shots = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grpo::{GrpoConfig, GrpoError, KlMode, Variant};
use crate::rewards::RewardConfig;
use crate::toy::GenSpec;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Grpo,
    Dapo,
    /// Supervised likelihood baseline.
    Sft,
}

/// Optional overrides on top of the algorithm preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoOverrides {
    pub group_size: Option<usize>,
    pub clip_eps_low: Option<f64>,
    pub clip_eps_high: Option<f64>,
    pub kl_beta: Option<f64>,
    pub std_epsilon: Option<f64>,
    pub learning_rate: Option<f64>,
    pub kl_mode: Option<KlMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training JSONL; generated from `train_gen` when absent.
    pub train: Option<PathBuf>,
    /// Evaluation JSONL; generated from `eval_gen` when absent.
    pub eval: Option<PathBuf>,
    pub train_gen: GenSpec,
    pub eval_gen: GenSpec,
    /// Few-shot subsample of the training set (shots per category).
    pub shots: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            eval: None,
            train_gen: GenSpec {
                count: 520,
                ..GenSpec::default()
            },
            eval_gen: GenSpec {
                seed: 1_000_003,
                count: 260,
                ..GenSpec::default()
            },
            shots: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopping {
    pub enabled: bool,
    /// Steps per averaging window.
    pub window: usize,
    /// Minimum improvement of the windowed mean reward.
    pub min_delta: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            enabled: true,
            window: 200,
            min_delta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub steps: u64,
    /// Queries (groups) per update.
    pub batch_groups: usize,
    /// Gradient steps per sampled batch; ratios leave 1 from the second on.
    pub inner_steps: usize,
    pub temperature: f64,
    /// Probability that a sampled completion has corrupted tags.
    pub fault_rate: f64,
    pub grpo: GrpoOverrides,
    pub rewards: RewardConfig,
    pub data: DataConfig,
    pub early_stopping: EarlyStopping,
    pub taus: Vec<f64>,
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    pub eval_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            algorithm: Algorithm::Grpo,
            steps: 1000,
            batch_groups: 4,
            inner_steps: 1,
            temperature: 1.0,
            fault_rate: 0.0,
            grpo: GrpoOverrides::default(),
            rewards: RewardConfig::default(),
            data: DataConfig::default(),
            early_stopping: EarlyStopping::default(),
            taus: vec![0.5, 0.7],
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 100,
            eval_every: 100,
        }
    }
}

/// Fields that do not affect the trajectory and are left out of the digest.
const BOOKKEEPING: [&str; 4] = ["steps", "out_dir", "checkpoint_every", "eval_every"];

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        toml::from_str(s).map_err(|e| e.to_string())
    }

    /// Loads a config file. Relative data paths and `out_dir` resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        if let Some(p) = cfg.data.train.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.data.eval.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective optimizer settings: the algorithm preset with overrides.
    pub fn grpo_config(&self) -> GrpoConfig {
        let base = match self.algorithm {
            Algorithm::Dapo => GrpoConfig::dapo(),
            _ => GrpoConfig::default(),
        };
        let o = &self.grpo;
        let mut cfg = GrpoConfig {
            group_size: o.group_size.unwrap_or(base.group_size),
            clip_eps_low: o.clip_eps_low.unwrap_or(base.clip_eps_low),
            clip_eps_high: o.clip_eps_high.unwrap_or(base.clip_eps_high),
            kl_beta: o.kl_beta.unwrap_or(base.kl_beta),
            std_epsilon: o.std_epsilon.unwrap_or(base.std_epsilon),
            learning_rate: o.learning_rate.unwrap_or(base.learning_rate),
            variant: base.variant,
            kl_mode: o.kl_mode.unwrap_or(base.kl_mode),
        };
        if self.algorithm == Algorithm::Dapo {
            cfg.variant = Variant::Dapo;
        } else if o.clip_eps_high.is_none() {
            cfg.clip_eps_high = cfg.clip_eps_low;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.grpo_config().validate()?;
        self.rewards
            .weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.batch_groups == 0 {
            return fail("batch_groups must be at least 1");
        }
        if self.inner_steps == 0 {
            return fail("inner_steps must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.fault_rate) {
            return fail("fault_rate must lie in [0, 1]");
        }
        if self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return fail("every tau must lie in (0, 1)");
        }
        if self.data.shots == Some(0) {
            return fail("shots must be positive");
        }
        if self.early_stopping.enabled && self.early_stopping.window == 0 {
            return fail("early_stopping.window must be positive");
        }
        Ok(())
    }

    /// SHA-256 over the canonical (key-sorted, compact) JSON form, excluding
    /// bookkeeping fields. Independent of field order in the source file.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            for k in BOOKKEEPING {
                map.remove(k);
            }
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
