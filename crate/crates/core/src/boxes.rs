//! Axis-aligned boxes and labeled box sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in pixels: top-left corner plus width and height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x: x1, y: y1, w: x2 - x1, h: y2 - y1 }
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x, self.y, self.x2(), self.y2()]
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Intersection with `[0, width] x [0, height]`; may be empty.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.x2().clamp(0.0, width);
        let y2 = self.y2().clamp(0.0, height);
        BBox::from_corners(x1, y1, x2.max(x1), y2.max(y1))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2().min(other.x2()) - self.x.max(other.x)).max(0.0);
        let h = (self.y2().min(other.y2()) - self.y.max(other.y)).max(0.0);
        w * h
    }

    /// IoU without validity checks; zero when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Boxes with class labels and optional confidence scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl BoxSet {
    pub fn new(boxes: Vec<BBox>, labels: Vec<usize>) -> Self {
        BoxSet { boxes, labels, scores: None }
    }

    pub fn scored(boxes: Vec<BBox>, labels: Vec<usize>, scores: Vec<f64>) -> Self {
        BoxSet { boxes, labels, scores: Some(scores) }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn score(&self, i: usize) -> f64 {
        self.scores.as_ref().map_or(1.0, |s| s[i])
    }

    /// Keeps entries where `keep(i)` is true.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> BoxSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> BoxSet {
        BoxSet {
            boxes: idx.iter().map(|&i| self.boxes[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            scores: self.scores.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
        }
    }

    pub fn without_scores(&self) -> BoxSet {
        BoxSet { scores: None, ..self.clone() }
    }

    /// Checks the box set invariants against an image size and class count.
    pub fn validate(&self, width: f64, height: f64, num_classes: usize) -> Result<()> {
        if self.labels.len() != self.boxes.len() || self.scores.as_ref().is_some_and(|s| s.len() != self.boxes.len()) {
            return Err(Error::Shape("box, label and score arrays differ in length".into()));
        }
        const EPS: f64 = 1e-6;
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.is_valid() {
                return Err(Error::Range(format!("box {i} has non-positive size: {b:?}")));
            }
            if b.x < -EPS || b.y < -EPS || b.x2() > width + EPS || b.y2() > height + EPS {
                return Err(Error::Range(format!("box {i} lies outside the {width}x{height} image: {b:?}")));
            }
            if self.labels[i] >= num_classes {
                return Err(Error::Range(format!("box {i} has label {} but only {num_classes} classes", self.labels[i])));
            }
        }
        if let Some(s) = &self.scores {
            if let Some(i) = s.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Range(format!("score {} of box {i} outside [0, 1]", s[i])));
            }
        }
        Ok(())
    }
}
