//! Binary PPM (P6) frames with colored track boxes over a depth backdrop.

use sdtrack::geometry::BBox;
use sdtrack::grid::Grid;

pub struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![0; width * height * 3] }
    }

    /// Grayscale backdrop: nearer pixels are brighter.
    pub fn from_depth(depth: &Grid<f32>) -> Self {
        let (lo, hi) = depth.data().iter().fold((f32::INFINITY, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = (hi - lo).max(f32::EPSILON);
        let mut c = Self::new(depth.width(), depth.height());
        for (px, &d) in c.rgb.chunks_exact_mut(3).zip(depth.data()) {
            let g = (40.0 + 180.0 * (hi - d) / span) as u8;
            px.fill(g);
        }
        c
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&color);
        }
    }

    /// Two-pixel box outline, clipped to the canvas.
    pub fn draw_box(&mut self, b: &BBox, color: [u8; 3]) {
        let (x1, y1) = (b.x1().round() as i64, b.y1().round() as i64);
        let (x2, y2) = (b.x2().round() as i64 - 1, b.y2().round() as i64 - 1);
        for t in 0..2 {
            for x in x1..=x2 {
                self.put(x, y1 + t, color);
                self.put(x, y2 - t, color);
            }
            for y in y1..=y2 {
                self.put(x1 + t, y, color);
                self.put(x2 - t, y, color);
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Well-separated saturated color per id (golden-ratio hue walk).
pub fn id_color(id: u64) -> [u8; 3] {
    let h = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}
