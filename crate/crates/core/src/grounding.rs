//! Temporal segments and spatial points from saliency maps, and their scores.

use serde::{Deserialize, Serialize};

use crate::eb::SaliencySequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pointing-game radius in pixels (a 15-pixel diameter disc).
pub const DEFAULT_RADIUS: f64 = 7.5;

/// Inclusive frame range `[start, end]` for one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize, label: usize) -> Segment {
        assert!(start <= end, "segment start {start} after end {end}");
        Segment { start, end, label }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..=self.end).contains(&t)
    }
}

/// Axis-aligned box in pixel units covering `[x, x + w] x [y, y + h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Euclidean distance from a point to the closed box (0 inside).
    pub fn distance_to(&self, p: Point) -> f64 {
        let dx = (self.x - p.x).max(0.0).max(p.x - (self.x + self.w));
        let dy = (self.y - p.y).max(0.0).max(p.y - (self.y + self.h));
        dx.hypot(dy)
    }
}

/// Pixel-space location; a pixel `(row, col)` is represented by its centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Result of unknown-length grounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grounding {
    pub segment: Segment,
    pub anchor: usize,
    /// Set when every sum is negative; the segment is then the anchor alone.
    pub degenerate: bool,
}

/// `S_t`, the sum of every entry of `Map^t`.
pub fn map_sums(sal: &SaliencySequence) -> Vec<f64> {
    sal.maps.iter().map(Tensor::sum).collect()
}

/// Index of the maximum; ties go to the earliest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy window around the peak sum, grown in both directions until a
/// strictly negative sum is met. Zero sums do not stop the growth.
pub fn temporal_ground(sums: &[f64], label: usize) -> Result<Grounding> {
    let anchor = argmax_first(sums).ok_or(Error::InvalidLength { length: 0, total: 0 })?;
    let mut start = anchor;
    while start > 0 && sums[start - 1] >= 0.0 {
        start -= 1;
    }
    let mut end = anchor;
    while end + 1 < sums.len() && sums[end + 1] >= 0.0 {
        end += 1;
    }
    Ok(Grounding { segment: Segment::new(start, end, label), anchor, degenerate: sums[anchor] < 0.0 })
}

/// The length-`len` window with the largest total; ties go to the earliest start.
pub fn fixed_length_ground(sums: &[f64], len: usize, label: usize) -> Result<Segment> {
    if len == 0 || len > sums.len() {
        return Err(Error::InvalidLength { length: len, total: sums.len() });
    }
    // Window totals are recomputed rather than slid so equal windows compare exactly equal.
    let totals: Vec<f64> = sums.windows(len).map(|w| w.iter().sum()).collect();
    let start = argmax_first(&totals).expect("at least one window");
    Ok(Segment::new(start, start + len - 1, label))
}

/// Nearest-neighbour upsampling of a `[h', w']` map to `[height, width]`.
pub fn upsample_nearest(map: &Tensor, height: usize, width: usize) -> Tensor {
    let (mh, mw) = map_dims(map);
    let src = map.data();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = y * mh / height;
        for x in 0..width {
            let sx = x * mw / width;
            out.push(src[sy * mw + sx]);
        }
    }
    Tensor::from_parts(vec![height, width], out)
}

fn map_dims(map: &Tensor) -> (usize, usize) {
    match map.shape() {
        [w] => (1, *w),
        [h, w] => (*h, *w),
        s => panic!("spatial map must be 1-D or 2-D, got {s:?}"),
    }
}

/// Maximum of a map after upsampling to the frame size; ties go to the first
/// pixel in row-major order.
pub fn spatial_point(map: &Tensor, height: usize, width: usize) -> Point {
    let up = upsample_nearest(map, height, width);
    let i = argmax_first(up.data()).expect("non-empty map");
    Point { x: (i % width) as f64 + 0.5, y: (i / width) as f64 + 0.5 }
}

/// Hit when the closed disc of `radius` around `point` touches the box.
pub fn hit_test(point: Point, bbox: &BBox, radius: f64) -> bool {
    bbox.distance_to(point) <= radius
}

pub fn temporal_point_game(sums: &[f64], gt: &Segment) -> bool {
    argmax_first(sums).is_some_and(|t| gt.contains(t))
}

/// Inclusive-frame intersection over union.
pub fn segment_iou(a: &Segment, b: &Segment) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = if lo <= hi { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Fraction of videos whose single prediction reaches IoU `alpha`.
pub fn localization_accuracy(preds: &[Segment], gts: &[Segment], alpha: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: gts.len() });
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| segment_iou(p, g) >= alpha).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `hits / (hits + misses)`, 0 when nothing was scored.
pub fn pointing_accuracy(hits: usize, misses: usize) -> f64 {
    if hits + misses == 0 {
        0.0
    } else {
        hits as f64 / (hits + misses) as f64
    }
}
