//! JSONL scene records.
//!
//! One record per line:
//!
//! ```json
//! {"id": "rec-000000", "task": "rec",
//!  "image": {"type": "synthetic", "scene": {"width": 128, "height": 128, "objects": [...]}},
//!  "query": "the leftmost ship", "relation": "leftmost", "category": "ship", "unique": false,
//!  "targets": [{"bbox": [10, 12, 30, 40], "label": "ship"}]}
//! ```
//!
//! GRES targets additionally carry an RLE `mask`. File images reference a
//! path and its pixel dimensions.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evalkit::FewShotItem;
use crate::geometry::{BBox, BinaryMask};
use crate::rewards::GroundTruth;
use crate::structured_output::{OvdItem, Task};
use crate::toy::{example_for_query, Instance, QuerySpec, Relation, Scene};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("record {id:?}: {message}")]
    Invalid { id: String, message: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
}

impl DataError {
    fn invalid(id: &str, message: impl Into<String>) -> Self {
        DataError::Invalid {
            id: id.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ImageRef {
    Synthetic { scene: Scene },
    File { path: String, width: usize, height: usize },
}

impl ImageRef {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            ImageRef::Synthetic { scene } => (scene.width, scene.height),
            ImageRef::File { width, height, .. } => (*width, *height),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub bbox: BBox,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    pub task: Task,
    pub image: ImageRef,
    pub query: String,
    #[serde(default = "any_relation")]
    pub relation: Relation,
    pub category: String,
    pub unique: bool,
    pub targets: Vec<Target>,
}

fn any_relation() -> Relation {
    Relation::Any
}

/// Ground truth from explicit targets. GRES needs masks; `canvas` is
/// `(width, height)` and defaults to the first mask's size.
pub fn ground_truth_from_targets(
    task: Task,
    targets: &[Target],
    canvas: Option<(usize, usize)>,
) -> Result<GroundTruth, String> {
    match task {
        Task::Rec => match targets {
            [t] => Ok(GroundTruth::Rec { bbox: t.bbox }),
            _ => Err(format!("rec ground truth needs exactly one target, got {}", targets.len())),
        },
        Task::Ovd => Ok(GroundTruth::Ovd {
            items: targets
                .iter()
                .map(|t| OvdItem {
                    bbox: t.bbox,
                    label: t.label.clone(),
                })
                .collect(),
        }),
        Task::Gres => {
            let masks: Vec<BinaryMask> = targets
                .iter()
                .enumerate()
                .map(|(i, t)| t.mask.clone().ok_or_else(|| format!("gres target {i} has no mask")))
                .collect::<Result<_, _>>()?;
            let (width, height) = canvas
                .or_else(|| masks.first().map(|m| (m.width(), m.height())))
                .ok_or("gres ground truth needs a canvas size or at least one mask")?;
            if let Some(m) = masks.iter().find(|m| (m.width(), m.height()) != (width, height)) {
                return Err(format!(
                    "mask is {}x{} but the canvas is {width}x{height}",
                    m.width(),
                    m.height()
                ));
            }
            Ok(GroundTruth::Gres { masks, width, height })
        }
    }
}

impl SceneRecord {
    pub fn from_instance(inst: &Instance) -> Self {
        let ex = &inst.example;
        let targets = ex
            .targets
            .iter()
            .map(|&i| {
                let o = &inst.scene.objects[i];
                Target {
                    bbox: o.bbox,
                    label: o.category.clone(),
                    mask: (ex.query.task == Task::Gres).then(|| o.mask(inst.scene.width, inst.scene.height)),
                }
            })
            .collect();
        Self {
            id: inst.id.clone(),
            task: ex.query.task,
            image: ImageRef::Synthetic {
                scene: inst.scene.clone(),
            },
            query: ex.query.text.clone(),
            relation: ex.query.relation,
            category: ex.query.category.clone(),
            unique: ex.unique,
            targets,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (w, h) = self.image.dims();
        self.ground_truth().map_err(|m| DataError::invalid(&self.id, m))?;
        for t in &self.targets {
            if t.bbox.x2 > w as f64 || t.bbox.y2 > h as f64 || t.bbox.x1 < 0.0 || t.bbox.y1 < 0.0 {
                return Err(DataError::invalid(&self.id, "target box leaves the canvas"));
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> Result<GroundTruth, String> {
        ground_truth_from_targets(self.task, &self.targets, Some(self.image.dims()))
    }

    /// Rebuilds the toy instance of a synthetic record and checks that the
    /// stored targets agree with the scene.
    pub fn to_instance(&self) -> Result<Instance, DataError> {
        let ImageRef::Synthetic { scene } = &self.image else {
            return Err(DataError::invalid(&self.id, "only synthetic scenes can be replayed by the toy policy"));
        };
        let query = QuerySpec {
            task: self.task,
            category: self.category.clone(),
            relation: self.relation,
            text: self.query.clone(),
        };
        let example = example_for_query(scene, query).map_err(|e| DataError::invalid(&self.id, e.to_string()))?;
        let expected: Vec<BBox> = example.targets.iter().map(|&i| scene.objects[i].bbox).collect();
        let stored: Vec<BBox> = self.targets.iter().map(|t| t.bbox).collect();
        if expected != stored {
            return Err(DataError::invalid(&self.id, "targets disagree with the scene"));
        }
        Ok(Instance {
            id: self.id.clone(),
            scene: scene.clone(),
            example,
        })
    }
}

impl FewShotItem for SceneRecord {
    fn category(&self) -> &str {
        &self.category
    }

    fn shots(&self) -> usize {
        self.targets.len().max(1)
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SceneRecord>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        rec.validate()?;
        if !seen.insert(rec.id.clone()) {
            return Err(DataError::DuplicateId(rec.id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[SceneRecord]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}
