//! Referring queries over a scene and their ground truth.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rewards::GroundTruth;
use crate::structured_output::{GresItem, OvdItem, ParsedAnswer, Task};

use super::scene::Scene;
use super::{rng_for, ToyError, CATEGORIES};

/// Spatial or size relation that singles out instances of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Any,
    Leftmost,
    Rightmost,
    Topmost,
    BottomRightOf,
    Largest,
    Smallest,
}

impl Relation {
    pub const SELECTIVE: [Relation; 6] = [
        Relation::Leftmost,
        Relation::Rightmost,
        Relation::Topmost,
        Relation::BottomRightOf,
        Relation::Largest,
        Relation::Smallest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Any => "any",
            Relation::Leftmost => "leftmost",
            Relation::Rightmost => "rightmost",
            Relation::Topmost => "topmost",
            Relation::BottomRightOf => "bottom-right-of",
            Relation::Largest => "largest",
            Relation::Smallest => "smallest",
        }
    }

    /// Natural-language referring phrase.
    pub fn phrase(self, category: &str) -> String {
        match self {
            Relation::Any => format!("the {category}"),
            Relation::BottomRightOf => format!("the {category} at the bottom right"),
            r => format!("the {} {category}", r.as_str()),
        }
    }

    /// Objects of `category` picked out by the relation. `Any` returns every
    /// instance. Selective relations return a single object, or `None` when
    /// the extreme is tied or the category is absent.
    pub fn resolve(self, scene: &Scene, category: &str) -> Option<Vec<usize>> {
        let inst = scene.instances_of(category);
        if inst.is_empty() {
            return None;
        }
        let key = |i: usize| -> f64 {
            let b = &scene.objects[i].bbox;
            let (cx, cy) = b.center();
            match self {
                Relation::Leftmost => -cx,
                Relation::Rightmost => cx,
                Relation::Topmost => -cy,
                Relation::BottomRightOf => cx + cy,
                Relation::Largest => b.area(),
                Relation::Smallest => -b.area(),
                Relation::Any => 0.0,
            }
        };
        if self == Relation::Any {
            return Some(inst);
        }
        let mut scored: Vec<(f64, usize)> = inst.iter().map(|&i| (key(i), i)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        if scored.len() > 1 && scored[0].0 - scored[1].0 < 1e-9 {
            return None;
        }
        Some(vec![scored[0].1])
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub task: Task,
    pub category: String,
    pub relation: Relation,
    pub text: String,
}

impl QuerySpec {
    pub fn new(task: Task, category: &str, relation: Relation) -> Self {
        let text = match (task, relation) {
            (Task::Ovd, _) => category.to_string(),
            (Task::Gres, Relation::Any) => format!("every {category} in the image"),
            _ => relation.phrase(category),
        };
        Self {
            task,
            category: category.to_string(),
            relation,
            text,
        }
    }
}

/// A query bound to a scene with its resolved targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub query: QuerySpec,
    /// Indices of the target objects, in object order.
    pub targets: Vec<usize>,
    /// The query category has exactly one instance in the scene.
    pub unique: bool,
    pub ground_truth: GroundTruth,
    /// The reference answer, as the task grammar would express it.
    pub answer: ParsedAnswer,
}

/// Resolves a query against a scene.
pub fn example_for_query(scene: &Scene, query: QuerySpec) -> Result<Example, ToyError> {
    let instances = scene.instances_of(&query.category);
    let targets = match query.relation.resolve(scene, &query.category) {
        Some(t) => t,
        None if query.task == Task::Ovd && instances.is_empty() => Vec::new(),
        None => {
            return Err(ToyError::Unresolvable {
                category: query.category.clone(),
                relation: query.relation,
            })
        }
    };
    if query.task == Task::Rec && targets.len() != 1 {
        return Err(ToyError::Unresolvable {
            category: query.category.clone(),
            relation: query.relation,
        });
    }
    let objs = &scene.objects;
    let (ground_truth, answer) = match query.task {
        Task::Rec => {
            let bbox = objs[targets[0]].bbox;
            (GroundTruth::Rec { bbox }, ParsedAnswer::Rec(bbox))
        }
        Task::Ovd => {
            let items: Vec<OvdItem> = targets
                .iter()
                .map(|&i| OvdItem {
                    bbox: objs[i].bbox,
                    label: query.category.clone(),
                })
                .collect();
            let is_none = items.is_empty();
            (GroundTruth::Ovd { items: items.clone() }, ParsedAnswer::Ovd { items, is_none })
        }
        Task::Gres => {
            let masks = targets.iter().map(|&i| objs[i].mask(scene.width, scene.height)).collect();
            let items: Vec<GresItem> = targets.iter().map(|&i| gres_item(scene, i)).collect();
            (
                GroundTruth::Gres {
                    masks,
                    width: scene.width,
                    height: scene.height,
                },
                ParsedAnswer::Gres { items, is_none: false },
            )
        }
    };
    Ok(Example {
        unique: instances.len() == 1,
        query,
        targets,
        ground_truth,
        answer,
    })
}

/// Box plus the two prompt keypoints used for object `i`: the shape
/// centroid and a point a quarter height below it.
pub fn gres_item(scene: &Scene, i: usize) -> GresItem {
    let o = &scene.objects[i];
    let c = o.centroid();
    let below = crate::geometry::Keypoint {
        x: c.x,
        y: c.y + o.bbox.height() / 4.0,
    };
    GresItem {
        bbox: o.bbox,
        keypoint1: c,
        keypoint2: below,
        clamped: false,
    }
}

/// Builds a query about `category` for the given task. REC and single-target
/// GRES queries about a repeated category use a uniquely resolving relation.
pub fn make_example_for(scene: &Scene, category: &str, seed: u64, task: Task) -> Result<Example, ToyError> {
    let mut rng = rng_for(seed, 11);
    let n = scene.instances_of(category).len();
    let relation = match task {
        Task::Ovd => Relation::Any,
        _ if n == 1 => Relation::Any,
        Task::Gres if rng.random_bool(0.5) => Relation::Any,
        _ => {
            let mut options = Relation::SELECTIVE.to_vec();
            options.shuffle(&mut rng);
            options
                .into_iter()
                .find(|r| r.resolve(scene, category).is_some())
                .ok_or(ToyError::Unresolvable {
                    category: category.to_string(),
                    relation: Relation::Any,
                })?
        }
    };
    example_for_query(scene, QuerySpec::new(task, category, relation))
}

/// Picks a category and builds a query. OVD queries occasionally name a
/// category absent from the scene.
pub fn make_example(scene: &Scene, seed: u64, task: Task) -> Result<Example, ToyError> {
    let mut rng = rng_for(seed, 12);
    let present = scene.categories();
    if present.is_empty() && task != Task::Ovd {
        return Err(ToyError::EmptyScene);
    }
    let category = if task == Task::Ovd && (present.is_empty() || rng.random_bool(0.15)) {
        let absent: Vec<&str> = CATEGORIES.iter().copied().filter(|c| !present.iter().any(|p| p == c)).collect();
        absent[rng.random_range(0..absent.len())].to_string()
    } else {
        present[rng.random_range(0..present.len())].clone()
    };
    make_example_for(scene, &category, seed, task)
}
