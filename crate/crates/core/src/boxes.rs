//! Box geometry shared by the dataset, detector and evaluator.
//!
//! Two conventions are used: corner boxes `(x, y, w, h)` with `(x, y)` the
//! top-left corner (dataset annotations, detections), and center boxes
//! `(cx, cy, w, h)` (anchors, offset encoding).

use serde::{Deserialize, Serialize};

/// Corner-format box: top-left `(x, y)` plus width and height, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYWH {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXYWH {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: self.x + self.w / 2.0,
            cy: self.y + self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }

    /// Clip to an image frame of `(height, width)`.
    pub fn clip(&self, height: f64, width: f64) -> BoxXYWH {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        BoxXYWH::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
    }
}

/// Center-format box used by anchors and offset encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_corner(&self) -> BoxXYWH {
        BoxXYWH {
            x: self.cx - self.w / 2.0,
            y: self.cy - self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }
}

/// Intersection-over-union of two corner boxes. Zero-area inputs yield 0.
pub fn iou(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    let ix0 = a.x.max(b.x);
    let iy0 = a.y.max(b.y);
    let ix1 = (a.x + a.w).min(b.x + b.w);
    let iy1 = (a.y + a.h).min(b.y + b.h);
    let iw = (ix1 - ix0).max(0.0);
    let ih = (iy1 - iy0).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identity() {
        let a = BoxXYWH::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        let a = BoxXYWH::new(0.0, 0.0, 10.0, 10.0);
        let b = BoxXYWH::new(10.0, 10.0, 5.0, 5.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_shift() {
        // Hand arithmetic: intersection 50, union 150.
        let a = BoxXYWH::new(0.0, 0.0, 10.0, 10.0);
        let b = BoxXYWH::new(5.0, 0.0, 10.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn iou_zero_area() {
        let a = BoxXYWH::new(3.0, 3.0, 0.0, 0.0);
        assert_eq!(iou(&a, &a), 0.0);
    }

    #[test]
    fn center_corner_round_trip() {
        let b = BoxXYWH::new(2.5, 3.0, 7.0, 4.0);
        let r = b.to_center().to_corner();
        assert!((r.x - b.x).abs() < 1e-12 && (r.h - b.h).abs() < 1e-12);
    }
}
