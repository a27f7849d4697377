//! Axis-aligned boxes in corner form and the offset parameterisation used for
//! box regression.

use serde::{Deserialize, Serialize};

use crate::phantom::Annotation;

/// Box with corners `(r1, c1)` (inclusive) and `(r2, c2)` (exclusive) in
/// pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub r1: f64,
    pub c1: f64,
    pub r2: f64,
    pub c2: f64,
}

/// Largest log-scale step accepted when decoding, so `exp` cannot overflow.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl Rect {
    pub fn new(r1: f64, c1: f64, r2: f64, c2: f64) -> Self {
        Self { r1, c1, r2, c2 }
    }

    /// From `(row, col, width, height)`.
    pub fn from_rcwh(row: f64, col: f64, width: f64, height: f64) -> Self {
        Self::new(row, col, row + height, col + width)
    }

    pub fn from_annotation(a: &Annotation) -> Self {
        Self::from_rcwh(a.row as f64, a.col as f64, a.width as f64, a.height as f64)
    }

    /// `(row, col, width, height)`.
    pub fn to_rcwh(&self) -> [f64; 4] {
        [self.r1, self.c1, self.c2 - self.c1, self.r2 - self.r1]
    }

    pub fn height(&self) -> f64 {
        self.r2 - self.r1
    }

    pub fn width(&self) -> f64 {
        self.c2 - self.c1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.r1 + self.r2), 0.5 * (self.c1 + self.c2))
    }

    pub fn area(&self) -> f64 {
        self.height().max(0.0) * self.width().max(0.0)
    }

    pub fn clip(&self, rows: f64, cols: f64) -> Self {
        Self::new(
            self.r1.clamp(0.0, rows),
            self.c1.clamp(0.0, cols),
            self.r2.clamp(0.0, rows),
            self.c2.clamp(0.0, cols),
        )
    }

    pub fn intersection(&self, o: &Rect) -> f64 {
        let h = self.r2.min(o.r2) - self.r1.max(o.r1);
        let w = self.c2.min(o.c2) - self.c1.max(o.c1);
        h.max(0.0) * w.max(0.0)
    }

    /// Intersection over union; zero when the union is empty.
    pub fn iou(&self, o: &Rect) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Offsets `(dy, dx, dh, dw)` taking `self` (the reference) to `target`.
    pub fn encode(&self, target: &Rect) -> [f64; 4] {
        let (ry, rx) = self.center();
        let (ty, tx) = target.center();
        [
            (ty - ry) / self.height(),
            (tx - rx) / self.width(),
            (target.height() / self.height()).ln(),
            (target.width() / self.width()).ln(),
        ]
    }

    /// Inverse of [`Rect::encode`], with scale offsets clamped for safety.
    pub fn decode(&self, d: [f64; 4]) -> Rect {
        let (ry, rx) = self.center();
        let cy = ry + d[0] * self.height();
        let cx = rx + d[1] * self.width();
        let h = self.height() * d[2].min(MAX_LOG_SCALE).exp();
        let w = self.width() * d[3].min(MAX_LOG_SCALE).exp();
        Rect::new(cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_boxes_iou_is_one_seventh() {
        let a = Rect::from_rcwh(0.0, 0.0, 2.0, 2.0);
        let b = Rect::from_rcwh(1.0, 1.0, 2.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Rect::from_rcwh(5.0, 5.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let anchor = Rect::new(2.0, 3.0, 10.0, 15.0);
        let target = Rect::new(1.5, 4.0, 12.0, 13.0);
        let back = anchor.decode(anchor.encode(&target));
        for (x, y) in [back.r1, back.c1, back.r2, back.c2].iter().zip([1.5, 4.0, 12.0, 13.0]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(anchor.encode(&anchor), [0.0; 4]);
    }

    #[test]
    fn rcwh_round_trip() {
        let r = Rect::from_rcwh(3.0, 4.0, 5.0, 6.0);
        assert_eq!(r.to_rcwh(), [3.0, 4.0, 5.0, 6.0]);
        assert_eq!(r.area(), 30.0);
    }
}
