//! Box geometry, overlap and motion-direction scoring.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Displacements shorter than this (in pixels) carry no direction.
pub const MIN_DISPLACEMENT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2}): requires x2 > x1 and y2 > y1")]
    Degenerate { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("non-finite box coordinate")]
    NonFinite,
}

/// Axis-aligned box in frame pixels, top-left / bottom-right corners.
///
/// Construction rejects empty and inverted boxes, so every `BBox` has
/// strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::Degenerate { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// MOTChallenge convention: top-left corner plus width and height.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    /// Center, area and aspect ratio (w / h).
    pub fn from_center_area_aspect(cx: f64, cy: f64, s: f64, r: f64) -> Result<Self, GeometryError> {
        if !(s > 0.0 && r > 0.0) {
            return Err(GeometryError::Degenerate { x1: cx, y1: cy, x2: cx, y2: cy });
        }
        let w = (s * r).sqrt();
        let h = s / w;
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
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
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    /// Grows every side by `frac` of the box's own width/height.
    pub fn expand(&self, frac: f64) -> Self {
        let px = self.width() * frac;
        let py = self.height() * frac;
        Self { x1: self.x1 - px, y1: self.y1 - py, x2: self.x2 + px, y2: self.y2 + py }
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;
    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    // min() keeps the ratio inside [0, 1] under rounding.
    (inter / (a.area() + b.area() - inter)).min(1.0)
}

/// Dense `tracks × dets` IoU matrix.
pub fn iou_matrix(tracks: &[BBox], dets: &[BBox]) -> DMatrix<f64> {
    DMatrix::from_fn(tracks.len(), dets.len(), |i, j| iou(&tracks[i], &dets[j]))
}

/// Unit motion direction, or `Undefined` for a (near) zero displacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Direction {
    Undefined,
    Unit { dx: f64, dy: f64 },
}

impl Direction {
    pub fn between(from: (f64, f64), to: (f64, f64)) -> Self {
        let (dx, dy) = (to.0 - from.0, to.1 - from.1);
        let norm = dx.hypot(dy);
        if !norm.is_finite() || norm < MIN_DISPLACEMENT {
            Direction::Undefined
        } else {
            Direction::Unit { dx: dx / norm, dy: dy / norm }
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, Direction::Unit { .. })
    }

    /// Angle in `[0, π]` between two defined directions.
    pub fn angle_to(&self, other: &Direction) -> Option<f64> {
        match (self, other) {
            (Direction::Unit { dx: ax, dy: ay }, Direction::Unit { dx: bx, dy: by }) => {
                Some((ax * bx + ay * by).clamp(-1.0, 1.0).acos())
            }
            _ => None,
        }
    }
}

/// Linear falloff `w_ang * (1 - Δθ/π)`; zero when either direction is undefined.
pub fn angle_consistency(track_dir: &Direction, cand_dir: &Direction, w_ang: f64) -> f64 {
    match track_dir.angle_to(cand_dir) {
        Some(theta) => (w_ang * (1.0 - theta / PI)).clamp(0.0, w_ang),
        None => 0.0,
    }
}

/// Direction of a track's recent motion from its observation history.
///
/// `history` must be sorted by frame. The reference observation is the
/// earliest one no older than `delta_t` frames before the last one, which is
/// the oldest available observation when the history is shorter than that.
pub fn track_direction(history: &[(u32, BBox)], delta_t: u32) -> Direction {
    let Some(&(last_frame, last_box)) = history.last() else {
        return Direction::Undefined;
    };
    let horizon = last_frame.saturating_sub(delta_t);
    let reference = history.iter().find(|(f, _)| *f >= horizon && *f < last_frame).map(|(_, b)| *b);
    match reference {
        Some(r) => Direction::between(r.center(), last_box.center()),
        None => Direction::Undefined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Pixel-count oracle for integer-aligned boxes.
    fn raster_iou(a: [i32; 4], c: [i32; 4]) -> f64 {
        let (mut inter, mut union) = (0u32, 0u32);
        for y in -50..50 {
            for x in -50..50 {
                let ina = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
                let inc = x >= c[0] && x < c[2] && y >= c[1] && y < c[3];
                inter += (ina && inc) as u32;
                union += (ina || inc) as u32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(20., 20., 30., 30.)), 0.0);
        let expected = raster_iou([0, 0, 10, 10], [5, 0, 15, 10]);
        assert!((expected - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&b(0., 0., 10., 10.), &b(5., 0., 15., 10.)) - expected).abs() < 1e-12);
    }

    #[test]
    fn iou_touching_edges_is_zero() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(10., 0., 20., 10.)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0., 0., 0., 10.).is_err());
        assert!(BBox::new(5., 0., 1., 10.).is_err());
        assert!(BBox::new(0., f64::NAN, 1., 10.).is_err());
        assert!(BBox::from_xywh(1., 1., -3., 4.).is_err());
    }

    #[test]
    fn iou_matrix_shapes_and_entries() {
        let one = [b(0., 0., 10., 10.)];
        assert_eq!(iou_matrix(&one, &one)[(0, 0)], 1.0);
        let m = iou_matrix(&[], &one);
        assert_eq!((m.nrows(), m.ncols()), (0, 1));
        let m = iou_matrix(&one, &[]);
        assert_eq!((m.nrows(), m.ncols()), (1, 0));

        let t = [b(0., 0., 10., 10.), b(3., 3., 9., 12.)];
        let d = [b(5., 0., 15., 10.), b(2., 4., 8., 8.)];
        let m = iou_matrix(&t, &d);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m[(i, j)], iou(&t[i], &d[j]));
            }
        }
    }

    #[test]
    fn angle_examples() {
        let right = Direction::between((0., 0.), (1., 0.));
        let left = Direction::between((0., 0.), (-3., 0.));
        let up = Direction::between((0., 0.), (0., 2.));
        assert!((angle_consistency(&right, &right, 0.2) - 0.2).abs() < 1e-15);
        assert!(angle_consistency(&right, &left, 0.2).abs() < 1e-15);
        let expected = 0.2 * (1.0 - (0.0f64).acos() / PI);
        assert!((angle_consistency(&right, &up, 0.2) - expected).abs() < 1e-15);
        assert!((expected - 0.1).abs() < 1e-15);
    }

    #[test]
    fn undefined_direction_scores_zero() {
        let still = Direction::between((3., 3.), (3., 3. + 1e-9));
        assert_eq!(still, Direction::Undefined);
        let right = Direction::between((0., 0.), (1., 0.));
        assert_eq!(angle_consistency(&still, &right, 0.2), 0.0);
        assert_eq!(angle_consistency(&right, &still, 0.2), 0.0);
    }

    #[test]
    fn track_direction_windows() {
        let boxes: Vec<(u32, BBox)> = (1..=6).map(|f| (f, b(f as f64, 0., f as f64 + 4., 4.))).collect();
        assert_eq!(track_direction(&boxes[..1], 3), Direction::Undefined);
        let d = track_direction(&boxes, 3);
        assert_eq!(d, Direction::Unit { dx: 1.0, dy: 0.0 });
        // history shorter than delta_t falls back to the oldest observation
        let short = vec![(4, b(0., 0., 2., 2.)), (5, b(0., 3., 2., 5.))];
        assert_eq!(track_direction(&short, 3), Direction::Unit { dx: 0.0, dy: 1.0 });
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), c in arb_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let v = iou(&a, &c);
            let w = iou(&a.translate(dx, dy), &c.translate(dx, dy));
            prop_assert!((v - w).abs() < 1e-12);
        }

        #[test]
        fn angle_symmetric_and_monotone(t1 in 0.0..6.2f64, t2 in 0.0..6.2f64, t3 in 0.0..6.2f64) {
            let d = |t: f64| Direction::between((0., 0.), (t.cos(), t.sin()));
            let (a, c, e) = (d(t1), d(t2), d(t3));
            prop_assert_eq!(angle_consistency(&a, &c, 0.2), angle_consistency(&c, &a, 0.2));
            let (th_c, th_e) = (a.angle_to(&c).unwrap(), a.angle_to(&e).unwrap());
            if th_c < th_e {
                prop_assert!(angle_consistency(&a, &c, 0.2) >= angle_consistency(&a, &e, 0.2));
            }
            if let Direction::Unit { dx, dy } = a {
                prop_assert!((dx * dx + dy * dy - 1.0).abs() < 1e-9);
            }
        }
    }
}
