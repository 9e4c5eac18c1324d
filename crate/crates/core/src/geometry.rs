//! Pixel-space primitives: boxes, keypoints and run-length encoded binary masks.
//!
//! Boxes are closed-open rectangles `[x1, x2) x [y1, y2)` in continuous pixel
//! coordinates. A pixel `(row, col)` belongs to a box when its center
//! `(col + 0.5, row + 0.5)` falls inside the rectangle, so for integer boxes the
//! box IoU and the IoU of the rasterized masks agree exactly.
//!
//! Masks are stored as row-major run lengths that alternate background and
//! foreground, starting with background. The stored runs are always canonical:
//! only the first run may be zero.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: coordinates must be finite, non-negative and ordered")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("invalid keypoint ({x}, {y}): coordinates must be finite and non-negative")]
    InvalidKeypoint { x: f64, y: f64 },
    #[error("mask dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("run lengths sum to {got}, expected {expected} (width * height)")]
    InvalidRle { got: u64, expected: u64 },
    #[error("bitmap has {got} pixels, expected {expected}")]
    InvalidBitmap { got: usize, expected: usize },
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        // Adding zero folds -0.0 into 0.0.
        let (x1, y1, x2, y2) = (x1 + 0.0, y1 + 0.0, x2 + 0.0, y2 + 0.0);
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from two arbitrary corners, sorting each coordinate pair.
    pub fn from_corners(xa: f64, ya: f64, xb: f64, yb: f64) -> Result<Self, GeometryError> {
        Self::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb))
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, p: &Keypoint) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    /// Clamps a point componentwise onto this (closed) box.
    pub fn clamp_point(&self, p: &Keypoint) -> Keypoint {
        Keypoint {
            x: p.x.clamp(self.x1, self.x2),
            y: p.y.clamp(self.y1, self.y2),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two boxes; zero when the union is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Result<Self, GeometryError> {
        let (x, y) = (x + 0.0, y + 0.0);
        if !(x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0) {
            return Err(GeometryError::InvalidKeypoint { x, y });
        }
        Ok(Self { x, y })
    }
}

impl Serialize for Keypoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Keypoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Keypoint::new(x, y).map_err(serde::de::Error::custom)
    }
}

/// Binary mask over a `width x height` canvas, stored as canonical row-major runs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    runs: Vec<u64>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self::from_intervals(width, height, &[])
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::from_intervals(width, height, &[(0, width * height)])
    }

    /// Builds a mask from run lengths; zero-length runs are folded away.
    pub fn from_rle(width: usize, height: usize, runs: &[u64]) -> Result<Self, GeometryError> {
        let total: u64 = runs.iter().sum();
        let expected = (width * height) as u64;
        if total != expected {
            return Err(GeometryError::InvalidRle { got: total, expected });
        }
        let mut intervals = Vec::new();
        let mut pos = 0usize;
        for (i, &run) in runs.iter().enumerate() {
            let end = pos + run as usize;
            if i % 2 == 1 && run > 0 {
                intervals.push((pos, end));
            }
            pos = end;
        }
        Ok(Self::from_intervals(width, height, &intervals))
    }

    pub fn from_bitmap(width: usize, height: usize, bits: &[bool]) -> Result<Self, GeometryError> {
        if bits.len() != width * height {
            return Err(GeometryError::InvalidBitmap {
                got: bits.len(),
                expected: width * height,
            });
        }
        let mut intervals = Vec::new();
        let mut start = None;
        for (i, &b) in bits.iter().enumerate() {
            match (b, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    intervals.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            intervals.push((s, bits.len()));
        }
        Ok(Self::from_intervals(width, height, &intervals))
    }

    /// `intervals` must be sorted half-open pixel ranges; touching or
    /// overlapping ranges are merged.
    fn from_intervals(width: usize, height: usize, intervals: &[(usize, usize)]) -> Self {
        let total = width * height;
        let mut runs = Vec::with_capacity(intervals.len() * 2 + 1);
        let mut pos = 0usize;
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(intervals.len());
        for &(s, e) in intervals {
            let (s, e) = (s.min(total), e.min(total));
            if s >= e {
                continue;
            }
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        for (s, e) in merged {
            runs.push((s - pos) as u64);
            runs.push((e - s) as u64);
            pos = e;
        }
        if pos < total || runs.is_empty() {
            runs.push((total - pos) as u64);
        }
        Self { width, height, runs }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn runs(&self) -> &[u64] {
        &self.runs
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Foreground pixel ranges in row-major index space.
    pub fn intervals(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.runs.len() / 2);
        let mut pos = 0usize;
        for (i, &run) in self.runs.iter().enumerate() {
            let end = pos + run as usize;
            if i % 2 == 1 && run > 0 {
                out.push((pos, end));
            }
            pos = end;
        }
        out
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn to_bitmap(&self) -> Vec<bool> {
        let mut bits = vec![false; self.width * self.height];
        for (s, e) in self.intervals() {
            bits[s..e].iter_mut().for_each(|b| *b = true);
        }
        bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        if row >= self.height || col >= self.width {
            return false;
        }
        let idx = row * self.width + col;
        self.intervals().iter().any(|&(s, e)| idx >= s && idx < e)
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), GeometryError> {
        if self.dims() != other.dims() {
            return Err(GeometryError::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask, GeometryError> {
        self.check_dims(other)?;
        let out = intersect_intervals(&self.intervals(), &other.intervals());
        Ok(Self::from_intervals(self.width, self.height, &out))
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<u64, GeometryError> {
        self.check_dims(other)?;
        Ok(intersect_intervals(&self.intervals(), &other.intervals())
            .iter()
            .map(|(s, e)| (e - s) as u64)
            .sum())
    }

    pub fn to_rle_json(&self) -> RleJson {
        RleJson {
            size: [self.height, self.width],
            counts: self.runs.clone(),
        }
    }
}

fn intersect_intervals(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let s = a[i].0.max(b[j].0);
        let e = a[i].1.min(b[j].1);
        if s < e {
            out.push((s, e));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// JSON form of a mask: `{"size": [height, width], "counts": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleJson {
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl TryFrom<RleJson> for BinaryMask {
    type Error = GeometryError;

    fn try_from(value: RleJson) -> Result<Self, Self::Error> {
        let [height, width] = value.size;
        BinaryMask::from_rle(width, height, &value.counts)
    }
}

impl Serialize for BinaryMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rle_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let json = RleJson::deserialize(d)?;
        BinaryMask::try_from(json).map_err(serde::de::Error::custom)
    }
}

/// Mask IoU. Two empty masks score 1, exactly one empty mask scores 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Pixel-wise OR. An empty list yields the all-background mask of `width x height`.
pub fn mask_union(
    masks: &[BinaryMask],
    width: usize,
    height: usize,
) -> Result<BinaryMask, GeometryError> {
    let mut all = Vec::new();
    for m in masks {
        if m.dims() != (width, height) {
            return Err(GeometryError::DimensionMismatch {
                left: (width, height),
                right: m.dims(),
            });
        }
        all.extend(m.intervals());
    }
    all.sort_unstable();
    Ok(BinaryMask::from_intervals(width, height, &all))
}

/// Column or row index range `[lo, hi)` whose pixel centers lie in `[a, b)`.
fn center_range(a: f64, b: f64, limit: usize) -> (usize, usize) {
    let lo = (a - 0.5).ceil().max(0.0).min(limit as f64) as usize;
    let hi = (b - 0.5).ceil().max(0.0).min(limit as f64) as usize;
    (lo, hi.max(lo))
}

/// Rasterizes a box by the pixel-center rule, clipped to the canvas.
pub fn rasterize_box(b: &BBox, width: usize, height: usize) -> BinaryMask {
    let (c0, c1) = center_range(b.x1, b.x2, width);
    let (r0, r1) = center_range(b.y1, b.y2, height);
    let mut intervals = Vec::with_capacity(r1.saturating_sub(r0));
    if c0 < c1 {
        for row in r0..r1 {
            intervals.push((row * width + c0, row * width + c1));
        }
    }
    BinaryMask::from_intervals(width, height, &intervals)
}

/// Keeps only the foreground pixels of `m` that fall inside the rasterized box.
pub fn trim_mask_to_box(m: &BinaryMask, b: &BBox) -> BinaryMask {
    let boxed = rasterize_box(b, m.width(), m.height());
    let out = intersect_intervals(&m.intervals(), &boxed.intervals());
    BinaryMask::from_intervals(m.width(), m.height(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn bitmap_from_fn(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        let bits: Vec<bool> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        BinaryMask::from_bitmap(w, h, &bits).unwrap()
    }

    #[test]
    fn box_iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        // 5x5 overlap cells out of 100 + 100 - 25 = 175 union cells.
        let iou = box_iou(&a, &bb(5.0, 5.0, 15.0, 15.0));
        assert!((iou - 25.0 / 175.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let z = bb(3.0, 3.0, 3.0, 3.0);
        assert_eq!(box_iou(&z, &z), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(5.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(-1.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert_eq!(
            BBox::from_corners(5.0, 6.0, 1.0, 2.0).unwrap(),
            bb(1.0, 2.0, 5.0, 6.0)
        );
    }

    #[test]
    fn mask_iou_examples() {
        let left = bitmap_from_fn(8, 8, |_, c| c < 4);
        let top = bitmap_from_fn(8, 8, |r, _| r < 4);
        assert_eq!(mask_iou(&left, &left).unwrap(), 1.0);
        assert_eq!(
            mask_iou(&BinaryMask::full(8, 8), &BinaryMask::empty(8, 8)).unwrap(),
            0.0
        );
        assert_eq!(
            mask_iou(&BinaryMask::empty(8, 8), &BinaryMask::empty(8, 8)).unwrap(),
            1.0
        );
        // Pixel-count oracle: 16 shared pixels, 48 in the union.
        let bl = left.to_bitmap();
        let bt = top.to_bitmap();
        let inter = bl.iter().zip(&bt).filter(|(a, b)| **a && **b).count();
        let union = bl.iter().zip(&bt).filter(|(a, b)| **a || **b).count();
        assert_eq!((inter, union), (16, 48));
        assert_eq!(mask_iou(&left, &top).unwrap(), 16.0 / 48.0);
    }

    #[test]
    fn mask_iou_dimension_mismatch() {
        let err = mask_iou(&BinaryMask::empty(4, 4), &BinaryMask::empty(4, 5)).unwrap_err();
        assert!(matches!(err, GeometryError::DimensionMismatch { .. }));
    }

    #[test]
    fn union_examples() {
        let m = bitmap_from_fn(4, 4, |r, c| r == c);
        assert_eq!(mask_union(std::slice::from_ref(&m), 4, 4).unwrap(), m);
        assert_eq!(mask_union(&[m.clone(), m.clone()], 4, 4).unwrap(), m);
        let left = bitmap_from_fn(4, 4, |_, c| c < 2);
        let right = bitmap_from_fn(4, 4, |_, c| c >= 2);
        assert_eq!(
            mask_union(&[left, right], 4, 4).unwrap(),
            BinaryMask::full(4, 4)
        );
        assert_eq!(mask_union(&[], 3, 2).unwrap(), BinaryMask::empty(3, 2));
        assert!(mask_union(&[m], 5, 5).is_err());
    }

    #[test]
    fn rasterize_examples() {
        assert_eq!(
            rasterize_box(&bb(0.0, 0.0, 6.0, 5.0), 6, 5),
            BinaryMask::full(6, 5)
        );
        assert!(rasterize_box(&bb(0.0, 0.0, 0.0, 0.0), 6, 5).is_empty());
        let m = rasterize_box(&bb(1.0, 1.0, 3.0, 3.0), 4, 4);
        let expected = bitmap_from_fn(4, 4, |r, c| (1..=2).contains(&r) && (1..=2).contains(&c));
        assert_eq!(m, expected);
        assert_eq!(m.area(), 4);
    }

    #[test]
    fn rasterize_clips_to_canvas() {
        let m = rasterize_box(&bb(2.0, 2.0, 100.0, 100.0), 4, 4);
        assert_eq!(m, bitmap_from_fn(4, 4, |r, c| r >= 2 && c >= 2));
    }

    #[test]
    fn rasterize_uses_pixel_centers_for_fractional_boxes() {
        // Centers at 0.5, 1.5, 2.5: only columns 1 and 2 fall in [1.2, 2.6).
        let m = rasterize_box(&bb(1.2, 0.0, 2.6, 1.0), 4, 1);
        assert_eq!(m.to_bitmap(), vec![false, true, true, false]);
    }

    #[test]
    fn trim_examples() {
        let inner = rasterize_box(&bb(2.0, 2.0, 4.0, 4.0), 10, 10);
        assert_eq!(trim_mask_to_box(&inner, &bb(1.0, 1.0, 8.0, 8.0)), inner);
        assert!(trim_mask_to_box(&BinaryMask::full(10, 10), &bb(3.0, 3.0, 3.0, 9.0)).is_empty());
        let b = bb(2.0, 2.0, 5.0, 5.0);
        assert_eq!(
            trim_mask_to_box(&BinaryMask::full(10, 10), &b),
            rasterize_box(&b, 10, 10)
        );
    }

    #[test]
    fn rle_canonical_and_validated() {
        let m = BinaryMask::from_rle(3, 2, &[0, 2, 0, 1, 3]).unwrap();
        assert_eq!(m.runs(), &[0, 3, 3]);
        assert!(BinaryMask::from_rle(3, 2, &[1, 2]).is_err());
        assert_eq!(BinaryMask::empty(3, 2).runs(), &[6]);
        assert_eq!(BinaryMask::full(3, 2).runs(), &[0, 6]);
    }

    #[test]
    fn rle_json_form() {
        let m = rasterize_box(&bb(1.0, 0.0, 2.0, 1.0), 3, 2);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"size":[2,3],"counts":[1,1,4]}"#);
        let back: BinaryMask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<BinaryMask>(r#"{"size":[2,3],"counts":[1,1]}"#).is_err());
    }

    #[test]
    fn get_reads_pixels() {
        let m = rasterize_box(&bb(1.0, 1.0, 2.0, 2.0), 3, 3);
        assert!(m.get(1, 1));
        assert!(!m.get(0, 1));
        assert!(!m.get(5, 5));
    }
}
