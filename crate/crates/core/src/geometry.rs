//! Axis-aligned box arithmetic: IoU, delta encoding, non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open continuous rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
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
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True when `other` lies inside `self` (boundaries inclusive).
    pub fn contains(&self, other: &BoxXYXY) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// Mirror horizontally inside an image of the given width.
    pub fn hflip(&self, image_width: f64) -> BoxXYXY {
        BoxXYXY {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    /// Clip to `[0, w] x [0, h]`, keeping at least `min_size` pixels per side.
    pub fn clip(&self, w: f64, h: f64, min_size: f64) -> BoxXYXY {
        let (x1, x2) = clip_span(self.x1, self.x2, w, min_size);
        let (y1, y2) = clip_span(self.y1, self.y2, h, min_size);
        BoxXYXY { x1, y1, x2, y2 }
    }
}

fn clip_span(lo: f64, hi: f64, limit: f64, min_size: f64) -> (f64, f64) {
    let mut lo = lo.clamp(0.0, limit);
    let mut hi = hi.clamp(0.0, limit);
    if hi - lo < min_size {
        let c = (0.5 * (lo + hi)).clamp(0.5 * min_size, limit - 0.5 * min_size);
        lo = c - 0.5 * min_size;
        hi = c + 0.5 * min_size;
    }
    (lo, hi)
}

impl TryFrom<[f64; 4]> for BoxXYXY {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoxXYXY::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        b.to_array()
    }
}

/// Regression offsets of a box relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta4 {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl Delta4 {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// A detection: box, unified class index and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "bbox")]
    pub bbox: BoxXYXY,
    pub class_id: usize,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BoxXYXY, class_id: usize, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Invalid(format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            class_id,
            score,
        })
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Encode `target` relative to `anchor` as (dcx/w, dcy/h, ln w'/w, ln h'/h).
pub fn encode(anchor: &BoxXYXY, target: &BoxXYXY) -> Delta4 {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    Delta4 {
        tx: (tx - ax) / anchor.width(),
        ty: (ty - ay) / anchor.height(),
        tw: (target.width() / anchor.width()).ln(),
        th: (target.height() / anchor.height()).ln(),
    }
}

/// Inverse of [`encode`]. Always yields a box with positive size.
pub fn decode(anchor: &BoxXYXY, delta: &Delta4) -> Result<BoxXYXY> {
    let (ax, ay) = anchor.center();
    let cx = ax + delta.tx * anchor.width();
    let cy = ay + delta.ty * anchor.height();
    let w = anchor.width() * delta.tw.exp();
    let h = anchor.height() * delta.th.exp();
    BoxXYXY::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Direction-tagged codec entry point.
#[derive(Debug, Clone, Copy)]
pub enum CodecValue {
    Box(BoxXYXY),
    Delta(Delta4),
}

/// Encode a box or decode a delta with respect to `anchor`.
pub fn box_delta_codec(anchor: &BoxXYXY, value: CodecValue) -> Result<CodecValue> {
    match value {
        CodecValue::Box(b) => Ok(CodecValue::Delta(encode(anchor, &b))),
        CodecValue::Delta(d) => decode(anchor, &d).map(CodecValue::Box),
    }
}

/// Per-coordinate scaling applied on top of [`encode`] by detector heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper bound on the log size ratio when decoding.
    pub max_log_ratio: f64,
}

impl BoxCoder {
    pub const fn new(weights: [f64; 4]) -> Self {
        Self {
            weights,
            // ln(1000 / 16)
            max_log_ratio: 4.135_166_556_742_356,
        }
    }

    pub fn encode(&self, anchor: &BoxXYXY, target: &BoxXYXY) -> [f64; 4] {
        let d = encode(anchor, target).to_array();
        [
            d[0] * self.weights[0],
            d[1] * self.weights[1],
            d[2] * self.weights[2],
            d[3] * self.weights[3],
        ]
    }

    /// Decode scaled deltas, clamping log ratios so that the result stays finite.
    pub fn decode(&self, anchor: &BoxXYXY, d: &[f64]) -> BoxXYXY {
        let m = self.max_log_ratio;
        let delta = Delta4 {
            tx: d[0] / self.weights[0],
            ty: d[1] / self.weights[1],
            tw: (d[2] / self.weights[2]).clamp(-m, m),
            th: (d[3] / self.weights[3]).clamp(-m, m),
        };
        let raw = |v: f64| if v.is_finite() { v } else { 0.0 };
        let delta = Delta4::new(raw(delta.tx), raw(delta.ty), delta.tw, delta.th);
        decode(anchor, &delta).unwrap_or(*anchor)
    }
}

/// Greedy per-class non-maximum suppression.
///
/// Returns kept indices sorted by descending score; ties keep the lower
/// index first.
pub fn nms(dets: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Class-agnostic variant of [`nms`] over plain boxes and scores.
pub fn nms_agnostic(boxes: &[BoxXYXY], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
