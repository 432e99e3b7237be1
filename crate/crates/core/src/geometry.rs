//! Axis-aligned bounding boxes, IoU, and coordinate transforms.
//!
//! Boxes are stored as (left, top, width, height) in pixel coordinates and
//! all areas are continuous (`w * h`), never integer pixel sets. Ground
//! truth files carry integer coordinates, predictions real ones; one
//! geometry path serves both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<S = f64> {
    /// Left edge.
    pub x: S,
    /// Top edge.
    pub y: S,
    pub w: S,
    pub h: S,
}

impl<S: Scalar> BBox<S> {
    pub fn new(x: S, y: S, w: S, h: S) -> Self {
        Self { x, y, w, h }
    }

    /// Validating constructor: width and height must be positive, all
    /// fields finite.
    pub fn checked(x: S, y: S, w: S, h: S) -> Result<Self> {
        let b = Self { x, y, w, h };
        if !b.is_valid() {
            return Err(Error::InvalidBox {
                w: w.to_f64(),
                h: h.to_f64(),
            });
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        self.w > S::zero()
            && self.h > S::zero()
            && self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn right(&self) -> S {
        self.x + self.w
    }

    pub fn bottom(&self) -> S {
        self.y + self.h
    }

    pub fn area(&self) -> S {
        self.w * self.h
    }

    /// Square root of the area, the size measure used for bucketing.
    pub fn sqrt_area(&self) -> S {
        self.area().sqrt()
    }

    pub fn center(&self) -> (S, S) {
        let two = S::from_f64(2.0);
        (self.x + self.w / two, self.y + self.h / two)
    }

    /// Intersection rectangle, or `None` when the boxes are disjoint or
    /// touch only along an edge.
    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 > x0 && y1 > y0 {
            Some(Self::new(x0, y0, x1 - x0, y1 - y0))
        } else {
            None
        }
    }

    /// True when `self` lies entirely inside `other`.
    pub fn contained_in(&self, other: &Self) -> bool {
        self.x >= other.x
            && self.y >= other.y
            && self.right() <= other.right()
            && self.bottom() <= other.bottom()
    }
}

/// Intersection over union of two boxes, in [0, 1].
///
/// Symmetric; 0 for disjoint boxes, 1 exactly for identical ones.
pub fn iou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    let inter = match a.intersection(b) {
        Some(r) => r.area(),
        None => return S::zero(),
    };
    if a == b {
        return S::one();
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Scale a box about the origin and then translate it.
///
/// `x' = scale*x + offset.0`, `y' = scale*y + offset.1`, sizes scale too.
pub fn transform_box<S: Scalar>(b: &BBox<S>, scale: S, offset: (S, S)) -> Result<BBox<S>> {
    if scale <= S::zero() || !scale.is_finite() {
        return Err(Error::NonPositiveScale(scale.to_f64()));
    }
    Ok(BBox::new(
        scale * b.x + offset.0,
        scale * b.y + offset.1,
        scale * b.w,
        scale * b.h,
    ))
}
