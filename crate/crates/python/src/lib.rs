//! Python bindings. Structured values cross the boundary as JSON strings in
//! the same shapes the command line tool reads and writes.

use georef::config::RunConfig;
use georef::dataset::SceneRecord;
use georef::evalkit::evaluate_policy;
use georef::geometry::{BBox, BinaryMask};
use georef::grpo::{GrpoConfig, Group, Rollout};
use georef::structured_output::{FormatMode, Task};
use georef::toy::{generate_instances, rng_for, GenSpec, Instance, Profile, ToyContext, FEATURE_NAMES};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Parses a lowercase enum name through its serde representation.
fn enum_from<T: DeserializeOwned>(name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown value {name:?}")))
}

fn bbox(b: [f64; 4]) -> PyResult<BBox> {
    BBox::new(b[0], b[1], b[2], b[3]).map_err(value_err)
}

fn mask(json: &str) -> PyResult<BinaryMask> {
    serde_json::from_str(json).map_err(value_err)
}

fn instance(record_json: &str) -> PyResult<Instance> {
    let rec: SceneRecord = serde_json::from_str(record_json).map_err(value_err)?;
    rec.to_instance().map_err(value_err)
}

/// IoU of two `[x1, y1, x2, y2]` boxes.
#[pyfunction]
fn box_iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(georef::box_iou(&bbox(a)?, &bbox(b)?))
}

/// IoU of two RLE masks given as `{"size": [h, w], "counts": [...]}`.
#[pyfunction]
fn mask_iou(a: &str, b: &str) -> PyResult<f64> {
    georef::mask_iou(&mask(a)?, &mask(b)?).map_err(value_err)
}

/// Returns `(think, answer, well_formed)`.
#[pyfunction]
fn extract_tagged(raw: &str) -> (String, String, bool) {
    let r = georef::extract_tagged(raw);
    (r.think, r.answer, r.well_formed)
}

#[pyfunction]
#[pyo3(signature = (raw, task, mode = "strict"))]
fn format_reward(raw: &str, task: &str, mode: &str) -> PyResult<u8> {
    let mode: FormatMode = enum_from(mode)?;
    Ok(georef::format_reward(raw, enum_from(task)?, mode))
}

/// Parses an answer body and returns its canonical text.
#[pyfunction]
fn parse_answer(task: &str, answer: &str) -> PyResult<String> {
    let parsed = georef::structured_output::parse_answer(enum_from(task)?, answer).map_err(value_err)?;
    Ok(georef::structured_output::emit(&parsed))
}

/// Scores a request (the `POST /v1/score` body) and returns the breakdown JSON.
#[pyfunction]
fn score(request_json: &str) -> PyResult<String> {
    let b = georef::scoring::score_json(request_json.as_bytes())
        .map_err(|e| PyValueError::new_err(format!("{}: {e}", e.reason())))?;
    serde_json::to_string(&b).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (rewards, std_epsilon = 1e-6))]
fn compute_advantages(rewards: Vec<f64>, std_epsilon: f64) -> PyResult<Vec<f64>> {
    let rollouts = rewards
        .iter()
        .enumerate()
        .map(|(i, &reward)| Rollout {
            action: i,
            completion: String::new(),
            logp_current: 0.0,
            logp_old: 0.0,
            logp_ref: 0.0,
            reward,
        })
        .collect();
    let cfg = GrpoConfig { std_epsilon, ..GrpoConfig::default() };
    georef::grpo::compute_advantages(&Group::new("py", rollouts), &cfg).map_err(value_err)
}

#[pyfunction]
fn k3(logp_current: f64, logp_ref: f64) -> f64 {
    georef::grpo::k3(logp_current, logp_ref)
}

/// Synthetic records as JSON strings, one per record.
#[pyfunction]
#[pyo3(signature = (task = "rec", count = 26, seed = 0, difficulty = 2, profile = "base"))]
fn generate(task: &str, count: usize, seed: u64, difficulty: u8, profile: &str) -> PyResult<Vec<String>> {
    let profile: Profile = enum_from(profile)?;
    let task: Task = enum_from(task)?;
    let spec = GenSpec { seed, task, count, difficulty, profile, ..GenSpec::default() };
    generate_instances(&spec)
        .iter()
        .map(|i| serde_json::to_string(&SceneRecord::from_instance(i)).map_err(value_err))
        .collect()
}

/// Runs training from TOML text and returns the summary JSON. Relative
/// paths in the config resolve against the working directory.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir = None))]
fn train(py: Python<'_>, config_toml: &str, out_dir: Option<std::path::PathBuf>) -> PyResult<String> {
    let mut cfg = RunConfig::from_toml_str(config_toml).map_err(value_err)?;
    if let Some(out) = out_dir {
        cfg.out_dir = out;
    }
    let summary = py.detach(|| georef::train::run_training(&cfg, None)).map_err(value_err)?;
    serde_json::to_string(&summary).map_err(value_err)
}

/// Log-linear policy over the candidate answers of a record.
#[pyclass]
struct ToyPolicy {
    inner: georef::toy::ToyPolicy,
}

#[pymethods]
impl ToyPolicy {
    #[new]
    #[pyo3(signature = (params = None, temperature = 1.0))]
    fn new(params: Option<Vec<f64>>, temperature: f64) -> PyResult<Self> {
        let params = params.unwrap_or_else(|| vec![0.0; FEATURE_NAMES.len()]);
        let inner = georef::toy::ToyPolicy::new(params, temperature).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Loads the policy stored in a checkpoint file.
    #[staticmethod]
    fn from_checkpoint(path: std::path::PathBuf) -> PyResult<Self> {
        let c = georef::checkpoint::Checkpoint::load(&path).map_err(value_err)?;
        Self::new(Some(c.params), c.temperature)
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params.clone()
    }

    #[staticmethod]
    fn feature_names() -> Vec<&'static str> {
        FEATURE_NAMES.to_vec()
    }

    /// Candidate probabilities for a record.
    fn probs(&self, record_json: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.probs(&instance(record_json)?.context()))
    }

    /// Canonical answer text of every candidate, aligned with `probs`.
    fn candidates(&self, record_json: &str) -> PyResult<Vec<String>> {
        let ctx = instance(record_json)?.context();
        Ok(ctx.candidates.iter().map(|c| georef::structured_output::emit(&c.answer)).collect())
    }

    #[pyo3(signature = (record_json, seed = 0, fault_rate = 0.0))]
    fn sample(&self, record_json: &str, seed: u64, fault_rate: f64) -> PyResult<String> {
        let inst = instance(record_json)?;
        let ctx = ToyContext::new(&inst.scene, &inst.example);
        let mut rng = rng_for(seed, 31);
        Ok(self
            .inner
            .sample_completion(&ctx, &inst.example.query, inst.scene.objects.len(), &mut rng, fault_rate)
            .1)
    }

    /// Greedy evaluation over records; returns the report JSON.
    #[pyo3(signature = (records, taus = vec![0.5, 0.7]))]
    fn evaluate(&self, records: Vec<String>, taus: Vec<f64>) -> PyResult<String> {
        let instances = records.iter().map(|r| instance(r)).collect::<PyResult<Vec<_>>>()?;
        let report = evaluate_policy(&self.inner, &instances, &taus).map_err(value_err)?;
        serde_json::to_string(&report).map_err(value_err)
    }
}

#[pymodule]
fn pygeoref(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(extract_tagged, m)?)?;
    m.add_function(wrap_pyfunction!(format_reward, m)?)?;
    m.add_function(wrap_pyfunction!(parse_answer, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(compute_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(k3, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<ToyPolicy>()?;
    Ok(())
}
