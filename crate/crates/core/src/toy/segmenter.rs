use crate::geometry::{box_iou, rasterize_box, BBox, BinaryMask, Keypoint};
use crate::rewards::Segmenter;

use super::scene::Scene;

/// Oracle segmenter over a synthetic scene.
///
/// Picks the object whose shape contains the first keypoint (else the
/// second), preferring the one whose box best overlaps the prompt box, and
/// returns its mask clipped to the prompt box. Without a hit it returns the
/// rasterized prompt box.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToySegmenter;

impl Segmenter for ToySegmenter {
    type Scene = Scene;

    fn segment(
        &self,
        scene: &Scene,
        bbox: &BBox,
        keypoint1: &Keypoint,
        keypoint2: &Keypoint,
        width: usize,
        height: usize,
    ) -> BinaryMask {
        let prompt = rasterize_box(bbox, width, height);
        let pick = |kp: &Keypoint| {
            let mut best: Option<(usize, f64)> = None;
            for (i, o) in scene.objects.iter().enumerate() {
                if !o.contains(kp) {
                    continue;
                }
                let iou = box_iou(&o.bbox, bbox);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            best.map(|(i, _)| i)
        };
        match pick(keypoint1).or_else(|| pick(keypoint2)) {
            Some(i) => scene.objects[i]
                .mask(width, height)
                .intersection(&prompt)
                .unwrap_or(prompt),
            None => prompt,
        }
    }
}
