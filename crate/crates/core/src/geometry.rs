//! Axis-aligned boxes in normalised center format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate box (cx={cx}, cy={cy}, w={w}, h={h})")]
    Degenerate { cx: f64, cy: f64, w: f64, h: f64 },
}

/// Box as `(cx, cy, w, h)`, coordinates normalised to the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let finite = [cx, cy, w, h].iter().all(|v| v.is_finite());
        if !finite || w <= 0.0 || h <= 0.0 || w * h < MIN_AREA {
            return Err(GeometryError::Degenerate { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    /// Area from the corner coordinates, so that `intersection(b, b) == area(b)`.
    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        (x2 - x1) * (y2 - y1)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    /// Fraction of this box's area covered by `other`.
    pub fn containment_in(&self, other: &BBox) -> f64 {
        self.intersection(other) / self.area()
    }

    /// Feature slice `(cx, cy, w, h)` used in pair features.
    pub fn encoding(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn l1_distance(&self, other: &BBox) -> f64 {
        self.encoding().iter().zip(other.encoding()).map(|(a, b)| (a - b).abs()).sum()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.encoding()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Generalised IoU: `iou - (hull - union) / hull`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    (inter / union).clamp(0.0, 1.0) - (hull - union).max(0.0) / hull
}

/// Dense `rows × cols` matrix of IoUs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseIou {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl PairwiseIou {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.cols + k]
    }
    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn pairwise_iou(a: &[BBox], b: &[BBox]) -> PairwiseIou {
    let values = a.iter().flat_map(|x| b.iter().map(move |y| iou(x, y))).collect();
    PairwiseIou {
        rows: a.len(),
        cols: b.len(),
        values,
    }
}
