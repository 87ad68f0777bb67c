//! Depth x mask fusion: the per-object map fed to the encoder.

use thiserror::Error;

use crate::geometry::BBox;
use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("depth is {depth:?} but mask is {mask:?}")]
    DimensionMismatch { depth: (usize, usize), mask: (usize, usize) },
    #[error("box {0:?} does not intersect the frame")]
    BoxOutsideFrame([f64; 4]),
    #[error("output resolution must be at least 1")]
    ZeroResolution,
}

/// Fused depth-segmentation crop of one object, `resolution x resolution`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedObjectMap {
    pub values: Grid<f64>,
    pub source_frame: u32,
    pub source_det: usize,
    /// No mask pixel fell inside the padded crop. Such maps carry no
    /// depth-segmentation information and must not be embedded.
    pub empty_mask: bool,
}

impl FusedObjectMap {
    pub fn resolution(&self) -> usize {
        self.values.width()
    }

    pub fn with_source(mut self, frame: u32, det: usize) -> Self {
        self.source_frame = frame;
        self.source_det = det;
        self
    }
}

/// Bilinear resize with half-pixel centers: output pixel `o` samples source
/// coordinate `(o + 0.5) * in / out - 0.5`, clamped to the border.
pub fn resize_bilinear(src: &Grid<f64>, out_w: usize, out_h: usize) -> Grid<f64> {
    assert!(src.width() >= 1 && src.height() >= 1 && out_w >= 1 && out_h >= 1, "empty resize");
    if src.width() == out_w && src.height() == out_h {
        return src.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(src.width(), out_w);
    let ys = taps(src.height(), out_h);
    let mut out = Grid::filled(out_w, out_h, 0.0);
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        let (r0, r1) = (src.row(y0), src.row(y1));
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            let top = r0[x0] + (r0[x1] - r0[x0]) * wx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * wx;
            out.set(ox, oy, top + (bottom - top) * wy);
        }
    }
    out
}

/// Largest depth value in the frame; the normalizer shared by every object.
pub fn depth_scale(depth: &Grid<f32>) -> f64 {
    depth.data().iter().fold(0.0f64, |m, &v| m.max(v as f64))
}

/// Builds the fused map for one object.
///
/// Depth is divided by the frame-wide maximum (so relative depth between
/// objects survives), multiplied by the binary mask, cropped to the box
/// grown by `pad_frac` per side and clipped to the frame, then resized.
pub fn fuse_object_map(
    depth: &Grid<f32>,
    mask: &Grid<u8>,
    bbox: &BBox,
    resolution: usize,
    pad_frac: f64,
) -> Result<FusedObjectMap, FusionError> {
    fuse_with_scale(depth, depth_scale(depth), mask, bbox, resolution, pad_frac)
}

/// [`fuse_object_map`] with a precomputed [`depth_scale`], for fusing many
/// objects of the same frame.
pub fn fuse_with_scale(
    depth: &Grid<f32>,
    scale: f64,
    mask: &Grid<u8>,
    bbox: &BBox,
    resolution: usize,
    pad_frac: f64,
) -> Result<FusedObjectMap, FusionError> {
    let (w, h) = (depth.width(), depth.height());
    if (mask.width(), mask.height()) != (w, h) {
        return Err(FusionError::DimensionMismatch { depth: (w, h), mask: (mask.width(), mask.height()) });
    }
    if resolution == 0 {
        return Err(FusionError::ZeroResolution);
    }
    let padded = bbox.expand(pad_frac);
    let x0 = padded.x1().floor().max(0.0);
    let y0 = padded.y1().floor().max(0.0);
    let x1 = padded.x2().ceil().min(w as f64);
    let y1 = padded.y2().ceil().min(h as f64);
    if x1 <= x0 || y1 <= y0 {
        return Err(FusionError::BoxOutsideFrame(bbox.corners()));
    }
    let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
    let inv = if scale > 0.0 { 1.0 / scale } else { 0.0 };

    let (cw, ch) = (x1 - x0, y1 - y0);
    let mut crop = Grid::filled(cw, ch, 0.0);
    let mut any = false;
    for y in y0..y1 {
        let (drow, mrow) = (depth.row(y), mask.row(y));
        for x in x0..x1 {
            if mrow[x] != 0 {
                any = true;
                crop.set(x - x0, y - y0, (drow[x] as f64 * inv).clamp(0.0, 1.0));
            }
        }
    }
    let values =
        if any { resize_bilinear(&crop, resolution, resolution) } else { Grid::filled(resolution, resolution, 0.0) };
    Ok(FusedObjectMap { values, source_frame: 0, source_det: 0, empty_mask: !any })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_grid_stays_constant() {
        let g = Grid::filled(5, 3, 0.7);
        for (w, h) in [(1, 1), (8, 8), (3, 7), (16, 2)] {
            let r = resize_bilinear(&g, w, h);
            assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn identity_resize_is_noop() {
        let g = Grid::from_vec(3, 3, (0..9).map(|v| v as f64 * 0.1).collect()).unwrap();
        assert_eq!(resize_bilinear(&g, 3, 3), g);
    }

    #[test]
    fn half_pixel_upsample_weights() {
        // Source x for outputs 0..4 at scale 1/2: -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1).
        let g = Grid::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize_bilinear(&g, 4, 2);
        for y in 0..2 {
            assert_eq!(r.row(y), &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn downsample_averages_pairs() {
        // Source x for outputs at scale 2: 0.5, 2.5 (midpoints between pixel pairs).
        let g = Grid::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize_bilinear(&g, 2, 1).data(), &[0.5, 2.5]);
    }

    fn frame_with_box(d: f32) -> (Grid<f32>, Grid<u8>, BBox) {
        let mut depth = Grid::filled(20, 20, 0.0f32);
        let mut mask = Grid::filled(20, 20, 0u8);
        for y in 4..12 {
            for x in 6..14 {
                depth.set(x, y, d);
                mask.set(x, y, 1);
            }
        }
        (depth, mask, BBox::new(6.0, 4.0, 14.0, 12.0).unwrap())
    }

    #[test]
    fn full_mask_constant_depth_is_one() {
        let (depth, mask, b) = frame_with_box(3.5);
        let m = fuse_object_map(&depth, &mask, &b, 8, 0.0).unwrap();
        assert!(!m.empty_mask);
        assert!(m.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_mask_is_flagged() {
        let (depth, _, b) = frame_with_box(2.0);
        let m = fuse_object_map(&depth, &Grid::filled(20, 20, 0), &b, 8, 0.1).unwrap();
        assert!(m.empty_mask);
        assert!(m.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_outside_padded_crop_counts_as_empty() {
        let (depth, _, b) = frame_with_box(2.0);
        let mut mask = Grid::filled(20, 20, 0u8);
        mask.set(19, 19, 1);
        assert!(fuse_object_map(&depth, &mask, &b, 8, 0.1).unwrap().empty_mask);
        mask.set(14, 12, 1); // inside the 10% pad
        assert!(!fuse_object_map(&depth, &mask, &b, 8, 0.1).unwrap().empty_mask);
    }

    #[test]
    fn relative_depth_survives_normalization() {
        let mut depth = Grid::filled(20, 10, 0.0f32);
        let mut mask_a = Grid::filled(20, 10, 0u8);
        let mut mask_b = Grid::filled(20, 10, 0u8);
        for y in 2..8 {
            for x in 1..7 {
                depth.set(x, y, 2.0);
                mask_a.set(x, y, 1);
            }
            for x in 11..17 {
                depth.set(x, y, 4.0);
                mask_b.set(x, y, 1);
            }
        }
        let a = fuse_object_map(&depth, &mask_a, &BBox::new(1., 2., 7., 8.).unwrap(), 4, 0.0).unwrap();
        let b = fuse_object_map(&depth, &mask_b, &BBox::new(11., 2., 17., 8.).unwrap(), 4, 0.0).unwrap();
        // frame range [0, 4]: 2 / 4 and 4 / 4
        assert!(a.values.data().iter().all(|&v| v == 0.5));
        assert!(b.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_mismatch_and_offframe() {
        let (depth, _, b) = frame_with_box(1.0);
        assert!(matches!(
            fuse_object_map(&depth, &Grid::filled(3, 3, 1), &b, 8, 0.1),
            Err(FusionError::DimensionMismatch { .. })
        ));
        let far = BBox::new(40.0, 40.0, 50.0, 50.0).unwrap();
        assert!(matches!(
            fuse_object_map(&depth, &Grid::filled(20, 20, 1), &far, 8, 0.1),
            Err(FusionError::BoxOutsideFrame(_))
        ));
    }

    fn arb_scene() -> impl Strategy<Value = (Grid<f32>, Grid<u8>, BBox)> {
        (
            prop::collection::vec(0.0f32..50.0, 16 * 12),
            prop::collection::vec(0u8..2, 16 * 12),
            (0.0..12.0f64, 0.0..9.0f64, 1.0..10.0f64, 1.0..8.0f64),
        )
            .prop_map(|(d, m, (x, y, w, h))| {
                (
                    Grid::from_vec(16, 12, d).unwrap(),
                    Grid::from_vec(16, 12, m).unwrap(),
                    BBox::from_xywh(x, y, w, h).unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn output_in_unit_range_and_flag_exact((depth, mask, b) in arb_scene(), r in 1usize..12) {
            let m = fuse_object_map(&depth, &mask, &b, r, 0.1).unwrap();
            prop_assert!(m.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let p = b.expand(0.1);
            let mut any = false;
            for y in 0..12 {
                for x in 0..16 {
                    let inside = (x as f64 + 1.0) > p.x1().floor() && (x as f64) < p.x2().ceil()
                        && (y as f64 + 1.0) > p.y1().floor() && (y as f64) < p.y2().ceil();
                    any |= inside && mask.get(x, y) != 0;
                }
            }
            prop_assert_eq!(m.empty_mask, !any);
        }

        #[test]
        fn depth_scale_cancels((depth, mask, b) in arb_scene(), c in 0.01f32..100.0, k in -4i32..4) {
            let base = fuse_object_map(&depth, &mask, &b, 8, 0.1).unwrap();
            let scaled = fuse_object_map(&depth.map(|v| v * c), &mask, &b, 8, 0.1).unwrap();
            for (x, y) in base.values.data().iter().zip(scaled.values.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            let pow2 = 2f32.powi(k);
            let exact = fuse_object_map(&depth.map(|v| v * pow2), &mask, &b, 8, 0.1).unwrap();
            prop_assert_eq!(base.values, exact.values);
        }
    }
}
