use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned image rectangle with detector metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub class_id: u32,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        Self::with_meta(x_min, y_min, x_max, y_max, 1.0, 0)
    }

    pub fn with_meta(x_min: f64, y_min: f64, x_max: f64, y_max: f64, score: f64, class_id: u32) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max, score, class_id };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.x_min, self.y_min, self.x_max, self.y_max, self.score];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(invalid("bounding box has non-finite entries"));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(invalid("bounding box is empty"));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(invalid("detection score outside [0, 1]"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x_min && u <= self.x_max && v >= self.y_min && v <= self.y_max
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Intersection with the image rectangle `[0, width] × [0, height]`;
    /// `None` when nothing is left.
    pub fn clipped(&self, width: f64, height: f64) -> Option<Self> {
        let b = Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
            ..*self
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { x_min: self.x_min + dx, x_max: self.x_max + dx, y_min: self.y_min + dy, y_max: self.y_max + dy, ..*self }
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            return 0.0;
        }
        let inter = w * h;
        inter / (self.area() + other.area() - inter)
    }
}
