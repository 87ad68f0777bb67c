//! Synthetic sequence generator: layered ellipses with depth, occlusion,
//! noisy detections, masks and appearance vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::grid::Grid;
use crate::io::{Detection, Frame, ObjectMask, SequenceBundle, TrackRow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("object extent {extent} px does not fit a {width} x {height} frame")]
    ObjectTooLarge { extent: f64, width: usize, height: usize },
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    /// Constant velocity, reflecting off the frame border.
    Linear,
    /// Linear drift plus a perpendicular sinusoid with per-object phase.
    Sinusoidal,
    /// Objects in pairs that approach, overlap and pass each other on a
    /// shared lane, with speed changes along the way.
    Crossing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppearanceMode {
    Distinct,
    /// Every object shares one base vector; only per-frame noise differs.
    Identical,
}

/// Frames in which the detector misses an object regardless of visibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dropout {
    pub object: usize,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: u32,
    pub objects: usize,
    pub motion: MotionModel,
    /// Range of ellipse semi-axes in pixels.
    pub radius: [f64; 2],
    /// Range of speeds in pixels per frame.
    pub speed: [f64; 2],
    /// Range of object depth planes; smaller is nearer.
    pub depth: [f64; 2],
    pub background_depth: f64,
    /// Depth bulge at an object's center relative to its rim.
    pub depth_relief: f64,
    /// Standard deviation of detection box noise in pixels.
    pub detection_noise: f64,
    /// Range of per-object unoccluded detection confidence.
    pub confidence: [f64; 2],
    pub confidence_floor: f64,
    pub appearance: AppearanceMode,
    pub appearance_dim: usize,
    pub appearance_noise: f64,
    pub dropouts: Vec<Dropout>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 320,
            height: 240,
            frames: 60,
            objects: 6,
            motion: MotionModel::Linear,
            radius: [10.0, 22.0],
            speed: [1.0, 3.0],
            depth: [2.0, 10.0],
            background_depth: 20.0,
            depth_relief: 0.5,
            detection_noise: 1.0,
            confidence: [0.75, 0.95],
            confidence_floor: 0.05,
            appearance: AppearanceMode::Distinct,
            appearance_dim: 16,
            appearance_noise: 0.1,
            dropouts: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return bad("frame size and frame count must be positive");
        }
        if !(ordered(self.radius) && self.radius[0] > 0.0) {
            return bad("radius range must be positive and ordered");
        }
        if !(ordered(self.speed) && self.speed[0] >= 0.0) || !(ordered(self.depth) && self.depth[0] > 0.0) {
            return bad("speed and depth ranges must be non-negative and ordered");
        }
        if self.background_depth.partial_cmp(&(self.depth[1] + self.depth_relief)) != Some(std::cmp::Ordering::Greater)
            || self.depth_relief < 0.0
        {
            return bad("background must lie behind every object");
        }
        if !(ordered(self.confidence) && self.confidence[0] > 0.0 && self.confidence[1] <= 1.0) {
            return bad("confidence range must lie in (0, 1]");
        }
        if !(0.0..=self.confidence[0]).contains(&self.confidence_floor) {
            return bad("confidence floor must lie in [0, min confidence]");
        }
        if self.appearance_dim == 0 || self.detection_noise < 0.0 || self.appearance_noise < 0.0 {
            return bad("appearance dimension must be positive and noise levels non-negative");
        }
        let extent = 2.0 * self.radius[1];
        if extent >= self.width as f64 || extent >= self.height as f64 {
            return Err(SimError::ObjectTooLarge { extent, width: self.width, height: self.height });
        }
        Ok(())
    }
}

/// Static description of one simulated object.
#[derive(Debug, Clone)]
struct Object {
    rx: f64,
    ry: f64,
    depth: f64,
    confidence: f64,
    start: (f64, f64),
    velocity: (f64, f64),
    /// Sinusoid amplitude, period and phase (sinusoidal and crossing motion).
    wobble: (f64, f64, f64),
    /// Frame at which a crossing object changes speed, and the factor.
    speed_change: (f64, f64),
}

fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (p - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

impl Object {
    fn center(&self, t: f64, motion: MotionModel, w: f64, h: f64) -> (f64, f64) {
        let (x0, y0) = self.start;
        let (vx, vy) = self.velocity;
        let (amp, period, phase) = self.wobble;
        let (lo_x, hi_x) = (self.rx + 1.0, w - self.rx - 1.0);
        let (lo_y, hi_y) = (self.ry + 1.0, h - self.ry - 1.0);
        match motion {
            MotionModel::Linear => (reflect(x0 + vx * t, lo_x, hi_x), reflect(y0 + vy * t, lo_y, hi_y)),
            MotionModel::Sinusoidal => {
                let s = amp * (std::f64::consts::TAU * t / period + phase).sin();
                let norm = (vx * vx + vy * vy).sqrt().max(1e-9);
                let (px, py) = (-vy / norm, vx / norm);
                (reflect(x0 + vx * t + s * px, lo_x, hi_x), reflect(y0 + vy * t + s * py, lo_y, hi_y))
            }
            MotionModel::Crossing => {
                let (t_change, factor) = self.speed_change;
                let travelled = if t <= t_change { t } else { t_change + (t - t_change) * factor };
                let s = amp * (std::f64::consts::TAU * t / period + phase).sin();
                ((x0 + vx * travelled).clamp(lo_x, hi_x), (y0 + s).clamp(lo_y, hi_y))
            }
        }
    }

    fn bbox(&self, c: (f64, f64)) -> BBox {
        BBox::new(c.0 - self.rx, c.1 - self.ry, c.0 + self.rx, c.1 + self.ry).expect("positive radii")
    }
}

fn build_objects(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let frames = cfg.frames as f64;
    let mut out = Vec::with_capacity(cfg.objects);
    for k in 0..cfg.objects {
        let rx = rng.random_range(cfg.radius[0]..=cfg.radius[1]);
        let ry = rng.random_range(cfg.radius[0]..=cfg.radius[1]);
        let depth = rng.random_range(cfg.depth[0]..=cfg.depth[1]);
        let confidence = rng.random_range(cfg.confidence[0]..=cfg.confidence[1]);
        let speed = rng.random_range(cfg.speed[0]..=cfg.speed[1]);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(5.0..20.0);
        let period = rng.random_range(15.0..40.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (start, velocity, speed_change) = match cfg.motion {
            MotionModel::Crossing => {
                // pair members start on opposite sides of a shared lane and meet mid-sequence
                let pairs = cfg.objects.div_ceil(2);
                let lane = (k / 2) as f64;
                let y = h * (lane + 0.5) / pairs as f64 + rng.random_range(-3.0..3.0);
                let meet = w / 2.0 + rng.random_range(-w / 8.0..w / 8.0);
                let dir = if k % 2 == 0 { 1.0 } else { -1.0 };
                let v = speed.clamp(0.4 * w / frames, 0.8 * w / frames);
                let x0 = meet - dir * v * frames / 2.0;
                let change = (rng.random_range(0.3..0.7) * frames, rng.random_range(0.4..1.6));
                ((x0, y), (dir * v, 0.0), change)
            }
            _ => {
                let start = (rng.random_range(rx + 1.0..w - rx - 1.0), rng.random_range(ry + 1.0..h - ry - 1.0));
                (start, (speed * heading.cos(), speed * heading.sin()), (f64::INFINITY, 1.0))
            }
        };
        out.push(Object { rx, ry, depth, confidence, start, velocity, wobble: (amp, period, phase), speed_change });
    }
    out
}

/// Per-frame render: owner map, depth map and full-ellipse pixel counts.
struct Render {
    owner: Grid<u16>,
    depth: Grid<f32>,
    full_area: Vec<usize>,
    visible_area: Vec<usize>,
}

const NO_OWNER: u16 = u16::MAX;

fn render(cfg: &SimConfig, objects: &[Object], centers: &[(f64, f64)]) -> Render {
    let (w, h) = (cfg.width, cfg.height);
    let mut owner = Grid::filled(w, h, NO_OWNER);
    let mut depth = Grid::filled(w, h, cfg.background_depth as f32);
    let mut full_area = vec![0; objects.len()];
    for (k, (o, &(cx, cy))) in objects.iter().zip(centers).enumerate() {
        let x0 = (cx - o.rx).floor().max(0.0) as usize;
        let x1 = ((cx + o.rx).ceil() as usize).min(w);
        let y0 = (cy - o.ry).floor().max(0.0) as usize;
        let y1 = ((cy + o.ry).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let q = ((x as f64 + 0.5 - cx) / o.rx).powi(2) + ((y as f64 + 0.5 - cy) / o.ry).powi(2);
                if q > 1.0 {
                    continue;
                }
                full_area[k] += 1;
                let z = (o.depth - cfg.depth_relief * (1.0 - q).sqrt()) as f32;
                // strictly nearer wins; ties go to the lower index
                if z < depth.get(x, y) {
                    depth.set(x, y, z);
                    owner.set(x, y, k as u16);
                }
            }
        }
    }
    let mut visible_area = vec![0; objects.len()];
    for &o in owner.data() {
        if o != NO_OWNER {
            visible_area[o as usize] += 1;
        }
    }
    Render { owner, depth, full_area, visible_area }
}

fn mask_of(r: &Render, k: usize) -> Grid<u8> {
    r.owner.map(|o| u8::from(o as usize == k))
}

/// Generates a bundle with ground truth. Object `k` has track id `k + 1`.
pub fn generate_sequence(cfg: &SimConfig) -> Result<SequenceBundle, SimError> {
    cfg.validate()?;
    if cfg.objects >= NO_OWNER as usize {
        return Err(SimError::InvalidConfig(format!("at most {} objects", NO_OWNER - 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects = build_objects(cfg, &mut rng);
    let base: Vec<Vec<f64>> = {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let shared: Vec<f64> = (0..cfg.appearance_dim).map(|_| normal.sample(&mut rng)).collect();
        (0..cfg.objects)
            .map(|_| match cfg.appearance {
                AppearanceMode::Identical => shared.clone(),
                AppearanceMode::Distinct => (0..cfg.appearance_dim).map(|_| normal.sample(&mut rng)).collect(),
            })
            .collect()
    };
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let centers: Vec<Vec<(f64, f64)>> = (1..=cfg.frames)
        .map(|t| objects.iter().map(|o| o.center((t - 1) as f64, cfg.motion, w, h)).collect())
        .collect();
    let renders: Vec<Render> = centers.iter().map(|c| render(cfg, &objects, c)).collect();

    let box_noise = Normal::new(0.0, cfg.detection_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let app_noise = Normal::new(0.0, cfg.appearance_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut frames = Vec::with_capacity(cfg.frames as usize);
    let mut gt = Vec::new();
    for t in 1..=cfg.frames {
        let ti = (t - 1) as usize;
        let r = &renders[ti];
        let mut frng = ChaCha8Rng::seed_from_u64(cfg.seed);
        frng.set_stream(t as u64);

        let mut visible: Vec<usize> = Vec::new();
        for (k, o) in objects.iter().enumerate() {
            if r.visible_area[k] == 0 {
                continue;
            }
            gt.push(TrackRow::from_bbox(t, k as u64 + 1, &o.bbox(centers[ti][k]), 1.0));
            let scripted = cfg.dropouts.iter().any(|d| d.object == k && (d.start..=d.end).contains(&t));
            if !scripted {
                visible.push(k);
            }
        }
        // detector output order carries no identity information
        for i in (1..visible.len()).rev() {
            visible.swap(i, frng.random_range(0..=i));
        }

        let mut detections = Vec::with_capacity(visible.len());
        let mut masks = Vec::new();
        let mut appearance = Vec::with_capacity(visible.len());
        for (det, &k) in visible.iter().enumerate() {
            let o = &objects[k];
            let (cx, cy) = centers[ti][k];
            let occluded = 1.0 - r.visible_area[k] as f64 / r.full_area[k].max(1) as f64;
            let confidence = (o.confidence * (1.0 - occluded)).max(cfg.confidence_floor);
            let bbox = loop {
                let (dx, dy) = (box_noise.sample(&mut frng), box_noise.sample(&mut frng));
                let (dw, dh) = (box_noise.sample(&mut frng), box_noise.sample(&mut frng));
                let (hw, hh) = ((o.rx + dw / 2.0).max(1.0), (o.ry + dh / 2.0).max(1.0));
                if let Ok(b) = BBox::new(cx + dx - hw, cy + dy - hh, cx + dx + hw, cy + dy + hh) {
                    break b;
                }
            };
            detections.push(Detection { bbox, confidence });
            masks.push(ObjectMask { det, ref_frame: t, mask: mask_of(r, k) });
            if t > 1 && renders[ti - 1].visible_area[k] > 0 {
                masks.push(ObjectMask { det, ref_frame: t - 1, mask: mask_of(&renders[ti - 1], k) });
            }
            appearance.push(base[k].iter().map(|b| (b + app_noise.sample(&mut frng)) as f32).collect());
        }
        frames.push(Frame { index: t, detections, depth: Some(r.depth.clone()), masks, appearance: Some(appearance) });
    }
    Ok(SequenceBundle { frame_size: Some((cfg.width, cfg.height)), frames, ground_truth: Some(gt) })
}
