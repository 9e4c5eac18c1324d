//! Versioned JSON checkpoints.
//!
//! A checkpoint holds everything needed to continue a run bit-exactly: the
//! policy and reference parameters, the sampler's RNG position, the reward
//! history used by early stopping, and the digest of the config it was
//! written under.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grpo::StepDiagnostics;
use crate::structured_output::Task;

pub const FORMAT_VERSION: u32 = 1;
/// Diagnostics lines kept in a checkpoint for inspection.
pub const DIAGNOSTICS_TAIL: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("parameter vector has {got} entries but the descriptor says {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("checkpoint was written under config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("bad rng state: {0}")]
    Rng(String),
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// 32-byte seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (a 68-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        let bad = |m: &str| CheckpointError::Rng(m.to_string());
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDescriptor {
    pub dim: usize,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    /// Task the policy was trained on.
    pub task: Task,
    pub descriptor: ParamDescriptor,
    pub params: Vec<f64>,
    pub reference_params: Vec<f64>,
    pub temperature: f64,
    pub rng: RngState,
    pub config_digest: String,
    /// Mean reward of every step so far.
    pub reward_history: Vec<f64>,
    pub diagnostics_tail: Vec<StepDiagnostics>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(self.format_version));
        }
        for v in [&self.params, &self.reference_params] {
            if v.len() != self.descriptor.dim {
                return Err(CheckpointError::Dimension {
                    expected: self.descriptor.dim,
                    got: v.len(),
                });
            }
        }
        self.rng.restore().map(|_| ())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| e.to_string())?;
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        // Write-then-rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| CheckpointError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }
}
