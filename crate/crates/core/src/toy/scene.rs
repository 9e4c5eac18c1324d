//! Procedural scenes: a canvas of non-overlapping rectangles and ellipses,
//! each tagged with an object category.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{box_iou, rasterize_box, BBox, BinaryMask, Keypoint};

use super::{rng_for, CATEGORIES};

pub const MAX_DIFFICULTY: u8 = 4;
/// Hard cap on instances of one category in a scene.
pub const MAX_INSTANCES: usize = 3;
const MAX_OBJECTS: usize = 12;
const MAX_PAIR_IOU: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub shape: Shape,
    pub bbox: BBox,
    pub category: String,
    /// Position among same-category instances, in object order.
    pub distractor_rank: usize,
}

impl SceneObject {
    pub fn centroid(&self) -> Keypoint {
        let (x, y) = self.bbox.center();
        Keypoint { x, y }
    }

    /// Whether a continuous point lies inside the shape.
    pub fn contains(&self, p: &Keypoint) -> bool {
        match self.shape {
            Shape::Rect => self.bbox.contains(p),
            Shape::Ellipse => self.in_ellipse(p.x, p.y),
        }
    }

    fn in_ellipse(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.bbox.center();
        let (a, b) = (self.bbox.width() / 2.0, self.bbox.height() / 2.0);
        if a <= 0.0 || b <= 0.0 {
            return false;
        }
        let (u, v) = ((x - cx) / a, (y - cy) / b);
        u * u + v * v < 1.0
    }

    /// Pixel mask on a `width x height` canvas (pixel-center rule).
    pub fn mask(&self, width: usize, height: usize) -> BinaryMask {
        match self.shape {
            Shape::Rect => rasterize_box(&self.bbox, width, height),
            Shape::Ellipse => {
                let boxed = rasterize_box(&self.bbox, width, height);
                let mut bits = vec![false; width * height];
                for (start, end) in boxed.intervals() {
                    for (off, bit) in bits[start..end].iter_mut().enumerate() {
                        let (row, col) = ((start + off) / width, (start + off) % width);
                        *bit = self.in_ellipse(col as f64 + 0.5, row as f64 + 0.5);
                    }
                }
                BinaryMask::from_bitmap(width, height, &bits).expect("bitmap matches canvas")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn instances_of(&self, category: &str) -> Vec<usize> {
        (0..self.objects.len())
            .filter(|&i| self.objects[i].category == category)
            .collect()
    }

    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self.objects.iter().map(|o| o.category.clone()).collect();
        cats.sort();
        cats.dedup();
        cats
    }

    pub fn area(&self) -> f64 {
        (self.width * self.height) as f64
    }
}

/// Scene distribution. `Shifted` uses a different canvas, object sizes,
/// horizontal placement bias and category frequencies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Base,
    Shifted,
}

impl Profile {
    pub fn canvas(self) -> (usize, usize) {
        match self {
            Profile::Base => (128, 128),
            Profile::Shifted => (160, 120),
        }
    }

    fn size_range(self, difficulty: u8) -> (usize, usize) {
        let d = difficulty as usize;
        match self {
            Profile::Base => (8, 16 + 4 * d),
            Profile::Shifted => (12, 22 + 3 * d),
        }
    }

    fn stream(self) -> u64 {
        match self {
            Profile::Base => 1,
            Profile::Shifted => 2,
        }
    }

    fn category_weight(self, index: usize) -> f64 {
        match self {
            Profile::Base => 1.0,
            Profile::Shifted => 1.0 / (1.0 + index as f64 / 4.0),
        }
    }

    fn sample_x(self, rng: &mut impl Rng, max_x: usize) -> usize {
        match self {
            Profile::Base => rng.random_range(0..=max_x),
            Profile::Shifted => {
                let u: f64 = rng.random();
                ((u.sqrt() * max_x as f64).round() as usize).min(max_x)
            }
        }
    }
}

/// Forces a category to appear with a given number of instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Focus {
    pub category: String,
    pub instances: usize,
}

/// Number of objects at a difficulty level; 3 at level 0, then growing.
pub fn object_count_range(difficulty: u8) -> (usize, usize) {
    let d = difficulty.min(MAX_DIFFICULTY) as usize;
    if d == 0 {
        (3, 3)
    } else {
        (3 + 2 * d, MAX_OBJECTS.min(4 + 2 * d))
    }
}

/// Extra same-category instances at a difficulty level.
pub fn duplicate_count(difficulty: u8) -> usize {
    difficulty.min(MAX_DIFFICULTY) as usize
}

pub fn generate_scene(seed: u64, difficulty: u8) -> Scene {
    generate_scene_with(seed, difficulty, Profile::Base, None)
}

pub fn generate_scene_with(seed: u64, difficulty: u8, profile: Profile, focus: Option<&Focus>) -> Scene {
    let difficulty = difficulty.min(MAX_DIFFICULTY);
    let mut rng = rng_for(seed, profile.stream());
    let (width, height) = profile.canvas();
    let (lo, hi) = object_count_range(difficulty);
    let n = rng.random_range(lo..=hi);
    let dups = duplicate_count(difficulty).min(n - 1);

    let focus_idx = focus.and_then(|f| CATEGORIES.iter().position(|c| *c == f.category));
    let focus_count = focus
        .map(|f| f.instances.clamp(1, MAX_INSTANCES).min(dups + 1))
        .unwrap_or(0);

    // Distinct categories first, then duplicates assigned among them.
    let distinct = n - dups;
    let mut pool: Vec<usize> = (0..CATEGORIES.len()).filter(|&i| Some(i) != focus_idx).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(distinct);
    if let Some(f) = focus_idx {
        chosen.push(f);
    }
    while chosen.len() < distinct && !pool.is_empty() {
        let weights: Vec<f64> = pool.iter().map(|&i| profile.category_weight(i)).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                pick = k;
                break;
            }
            u -= w;
        }
        chosen.push(pool.remove(pick));
    }
    let mut counts = vec![1usize; chosen.len()];
    let mut extra = dups;
    if focus_idx.is_some() {
        counts[0] = focus_count;
        extra -= focus_count - 1;
    }
    let free: Vec<usize> = (usize::from(focus_idx.is_some())..chosen.len()).collect();
    while extra > 0 {
        let open: Vec<usize> = free.iter().copied().filter(|&k| counts[k] < MAX_INSTANCES).collect();
        let Some(&k) = open.get(rng.random_range(0..open.len().max(1))) else {
            break;
        };
        counts[k] += 1;
        extra -= 1;
    }
    let mut labels: Vec<usize> = chosen
        .iter()
        .zip(&counts)
        .flat_map(|(&c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(&mut rng);

    let (min_side, max_side) = profile.size_range(difficulty);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(labels.len());
    for &cat in &labels {
        let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
        let bbox = place(&mut rng, profile, &objects, width, height, min_side, max_side);
        objects.push(SceneObject {
            shape,
            bbox,
            category: CATEGORIES[cat].to_string(),
            distractor_rank: 0,
        });
    }
    for i in 0..objects.len() {
        objects[i].distractor_rank = objects[..i]
            .iter()
            .filter(|o| o.category == objects[i].category)
            .count();
    }
    Scene { width, height, objects }
}

fn compatible(candidate: &BBox, existing: &[SceneObject]) -> bool {
    let (cx, cy) = candidate.center();
    let c = Keypoint { x: cx, y: cy };
    existing.iter().all(|o| {
        box_iou(candidate, &o.bbox) <= MAX_PAIR_IOU && !o.bbox.contains(&c) && !candidate.contains(&o.centroid())
    })
}

fn place(
    rng: &mut impl Rng,
    profile: Profile,
    existing: &[SceneObject],
    width: usize,
    height: usize,
    min_side: usize,
    max_side: usize,
) -> BBox {
    let mut last = None;
    for attempt in 0..2000 {
        // Shrink objects if the canvas is crowded.
        let hi = if attempt < 1000 { max_side } else { min_side + 2 };
        let w = rng.random_range(min_side..=hi);
        let h = rng.random_range(min_side..=hi);
        let x = profile.sample_x(rng, width - w);
        let y = rng.random_range(0..=height - h);
        let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).expect("valid box");
        if compatible(&bbox, existing) {
            return bbox;
        }
        last = Some(bbox);
    }
    last.expect("at least one attempt")
}
