//! Axis-aligned boxes on the integer pixel grid and their overlap measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A box anchored at its top-left pixel, covering the half-open region
/// `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BoundingBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Result<Self> {
        if w <= 0 || h <= 0 {
            return Err(Error::invalid(
                "BoundingBox::new",
                format!("extents must be positive, got w={w} h={h}"),
            ));
        }
        Ok(BoundingBox { x, y, w, h })
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> i64 {
        let ix = (self.right().min(other.right()) - self.x.max(other.x)).max(0);
        let iy = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0);
        ix * iy
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}
