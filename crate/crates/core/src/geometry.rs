//! Axis-aligned box arithmetic in level-0 slide pixels.
//!
//! Origin is the top-left corner of the slide, x grows rightward and y grows
//! downward. Everything stays in `f64`; rounding only happens when a box is
//! turned into a file name or other serialized key.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has non-positive size: w={w}, h={h}")]
    NonPositiveSize { w: f64, h: f64 },
    #[error("box has a non-finite coordinate")]
    NonFinite,
}

/// An axis-aligned rectangle `(x, y, w, h)` with `(x, y)` the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Builds a box without checking the size invariant.
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn try_new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, w, h).validated()
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Square of side `side` centered on `(cx, cy)`.
    pub fn centered_square(cx: f64, cy: f64, side: f64) -> Self {
        Self::new(cx - side / 2.0, cy - side / 2.0, side, side)
    }

    pub fn validated(self) -> Result<Self, GeometryError> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(GeometryError::NonPositiveSize { w: self.w, h: self.h });
        }
        Ok(self)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BBox::from_corners(x0, y0, x1, y1))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        self.intersection(other).map_or(0.0, |b| b.area())
    }

    /// True when `other` lies entirely inside `self` (edges may touch).
    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Moves the box (without resizing) so that it lies inside
    /// `[0, width] x [0, height]`. Along an axis where the box is larger than
    /// the bounds it is centered on the bounds instead.
    pub fn clamp_translate(&self, width: f64, height: f64) -> BBox {
        fn axis(start: f64, len: f64, limit: f64) -> f64 {
            if len > limit {
                (limit - len) / 2.0
            } else {
                start.clamp(0.0, limit - len)
            }
        }
        BBox::new(
            axis(self.x, self.w, width),
            axis(self.y, self.h, height),
            self.w,
            self.h,
        )
    }

    /// Crops the box to `[0, width] x [0, height]`; `None` if nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        self.intersection(&BBox::new(0.0, 0.0, width, height))
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Smallest box covering both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox::from_corners(
        a.x.min(b.x),
        a.y.min(b.y),
        a.right().max(b.right()),
        a.bottom().max(b.bottom()),
    )
}

/// Fraction of the smaller box's area covered by the intersection.
pub fn containment_fraction(a: &BBox, b: &BBox) -> f64 {
    let smaller = a.area().min(b.area());
    if smaller <= 0.0 {
        return 0.0;
    }
    a.intersection_area(b) / smaller
}

/// Complete-IoU loss: `1 - IoU + rho^2 / c^2 + alpha * v`.
///
/// `rho` is the distance between box centers and `c` the diagonal of the
/// smallest enclosing box. The aspect term uses
/// `v = 4/pi^2 * (atan(w_gt/h_gt) - atan(w/h))^2` and
/// `alpha = v / ((1 - IoU) + v)`, with `alpha = 0` when both `v` and
/// `1 - IoU` vanish.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let overlap = iou(pred, gt);
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let enclosing = union_box(pred, gt);
    let c2 = enclosing.w.powi(2) + enclosing.h.powi(2);
    let distance_term = if c2 > 0.0 { rho2 / c2 } else { 0.0 };

    let v = 4.0 / (PI * PI) * ((gt.w / gt.h).atan() - (pred.w / pred.h).atan()).powi(2);
    let denom = (1.0 - overlap) + v;
    let alpha = if denom > 0.0 { v / denom } else { 0.0 };

    1.0 - overlap + distance_term + alpha * v
}
