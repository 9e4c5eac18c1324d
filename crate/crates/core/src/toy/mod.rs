//! Synthetic referring world.
//!
//! Scenes are procedurally generated canvases of labelled shapes. A query
//! names a category, optionally with a relation that singles out one of its
//! instances. The policy chooses among an enumerable set of candidate
//! answers, which keeps its log-probabilities and gradients exact.

pub mod policy;
pub mod query;
pub mod scene;
pub mod segmenter;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::structured_output::Task;

pub use policy::{candidates, render_completion, Candidate, Fault, ToyContext, ToyPolicy, FEATURE_DIM, FEATURE_NAMES};
pub use query::{example_for_query, make_example, make_example_for, Example, QuerySpec, Relation};
pub use scene::{generate_scene, generate_scene_with, Focus, Profile, Scene, SceneObject, Shape, MAX_DIFFICULTY};
pub use segmenter::ToySegmenter;

pub const CATEGORIES: [&str; 26] = [
    "airplane",
    "airport",
    "baseball field",
    "basketball court",
    "bridge",
    "chimney",
    "dam",
    "expressway service area",
    "expressway toll station",
    "golf field",
    "ground track field",
    "harbor",
    "overpass",
    "ship",
    "stadium",
    "storage tank",
    "tennis court",
    "train station",
    "vehicle",
    "wind mill",
    "roundabout",
    "swimming pool",
    "soccer field",
    "helipad",
    "parking lot",
    "container",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToyError {
    #[error("relation {relation} does not single out a {category:?}")]
    Unresolvable { category: String, relation: Relation },
    #[error("scene has no objects")]
    EmptyScene,
    #[error("answer is not in the candidate set")]
    NotACandidate,
    #[error("policy expects {expected} parameters, got {got}")]
    ParamDim { expected: usize, got: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
}

/// SplitMix64 finalizer, used to derive per-record seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One generated record: a scene and a query over it.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub scene: Scene,
    pub example: Example,
}

impl Instance {
    pub fn context(&self) -> ToyContext {
        ToyContext::new(&self.scene, &self.example)
    }
}

/// `log pi(candidate | scene, query)` and its parameter gradient. Answers
/// outside the candidate set are rejected.
pub fn policy_logprob(
    policy: &ToyPolicy,
    scene: &Scene,
    example: &Example,
    candidate: &crate::structured_output::ParsedAnswer,
) -> Result<(f64, Vec<f64>), ToyError> {
    policy.answer_log_prob(&ToyContext::new(scene, example), candidate)
}

/// Samples one completion; `fault_rate` is the probability of corrupted tags.
pub fn policy_sample(policy: &ToyPolicy, scene: &Scene, example: &Example, seed: u64, fault_rate: f64) -> String {
    let ctx = ToyContext::new(scene, example);
    let mut rng = rng_for(seed, 31);
    policy
        .sample_completion(&ctx, &example.query, scene.objects.len(), &mut rng, fault_rate)
        .1
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub task: Task,
    pub count: usize,
    pub difficulty: u8,
    pub profile: Profile,
    /// Use only the first `categories` entries of [`CATEGORIES`].
    pub categories: usize,
    /// Probability that a record's category has several instances
    /// (ignored at difficulty 0).
    pub non_unique_rate: f64,
    /// OVD only: probability that the queried category is absent.
    pub negative_rate: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Rec,
            count: 100,
            difficulty: 2,
            profile: Profile::Base,
            categories: CATEGORIES.len(),
            non_unique_rate: 0.5,
            negative_rate: 0.1,
        }
    }
}

/// Generates `spec.count` records. Record `i` queries category
/// `i mod categories`, so every category is covered.
pub fn generate_instances(spec: &GenSpec) -> Vec<Instance> {
    let n_cat = spec.categories.clamp(1, CATEGORIES.len());
    (0..spec.count)
        .map(|i| {
            let rec_seed = mix_seed(spec.seed, i as u64);
            let mut rng = rng_for(rec_seed, 21);
            let category = CATEGORIES[i % n_cat];
            let negative = spec.task == Task::Ovd && rng.random_bool(spec.negative_rate.clamp(0.0, 1.0));
            let multi = spec.difficulty > 0 && rng.random_bool(spec.non_unique_rate.clamp(0.0, 1.0));
            let instances = if multi { rng.random_range(2..=3) } else { 1 };
            let focus = Focus {
                category: category.to_string(),
                instances,
            };
            let scene = generate_scene_with(rec_seed, spec.difficulty, spec.profile, (!negative).then_some(&focus));
            let example = if negative {
                let absent = (0..CATEGORIES.len())
                    .map(|k| CATEGORIES[(i + k) % CATEGORIES.len()])
                    .find(|c| scene.instances_of(c).is_empty())
                    .expect("scenes never hold every category");
                make_example_for(&scene, absent, rec_seed, spec.task)
            } else {
                make_example_for(&scene, category, rec_seed, spec.task)
            }
            .expect("focused category resolves");
            Instance {
                id: format!("{}-{i:06}", spec.task),
                scene,
                example,
            }
        })
        .collect()
}
