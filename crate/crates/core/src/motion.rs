//! Constant-velocity Kalman filter over `[cx, cy, s, r, vcx, vcy, vs]` with
//! observation-centric re-update after occlusion gaps.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

type Vec7 = SVector<f64, 7>;
type Mat7 = SMatrix<f64, 7, 7>;
type Vec4 = SVector<f64, 4>;
type Mat4 = SMatrix<f64, 4, 4>;
type Mat47 = SMatrix<f64, 4, 7>;

/// Smallest area and aspect ratio a decoded box may have.
const MIN_SHAPE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanParams {
    /// Diagonal of R over `(cx, cy, s, r)`.
    pub measurement_noise: [f64; 4],
    /// Diagonal of Q over the full state.
    pub process_noise: [f64; 7],
    /// Diagonal of P right after the first observation.
    pub initial_covariance: [f64; 7],
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            measurement_noise: [1.0, 1.0, 10.0, 10.0],
            process_noise: [1.0, 1.0, 1.0, 1.0, 1e-2, 1e-2, 1e-4],
            // observed components start at the measurement noise; velocities are unknown
            initial_covariance: [1.0, 1.0, 10.0, 10.0, 1e4, 1e4, 1e4],
        }
    }
}

impl KalmanParams {
    /// Noise-free filter: exact constant-velocity motion is tracked exactly
    /// once two observations are in.
    pub fn noiseless() -> Self {
        Self {
            measurement_noise: [0.0; 4],
            process_noise: [0.0; 7],
            initial_covariance: [0.0, 0.0, 0.0, 0.0, 1e4, 1e4, 1e4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stash {
    x: Vec7,
    p: Mat7,
    frame: u32,
}

/// Motion state of one track. `frame` is the frame the mean refers to; it
/// advances by one per [`MotionState::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct MotionState {
    x: Vec7,
    p: Mat7,
    q: Mat7,
    r: Mat4,
    frame: u32,
    stash: Option<Stash>,
    history: Vec<(u32, BBox)>,
}

fn measurement(b: &BBox) -> Vec4 {
    let (cx, cy) = b.center();
    Vec4::new(cx, cy, b.area(), b.width() / b.height())
}

fn h() -> Mat47 {
    Mat47::from_fn(|i, j| if i == j { 1.0 } else { 0.0 })
}

fn f() -> Mat7 {
    let mut f = Mat7::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

fn symmetrize(p: &mut Mat7) {
    *p = (*p + p.transpose()) * 0.5;
}

fn lerp_box(a: &BBox, b: &BBox, t: f64) -> BBox {
    let (ca, cb) = (a.corners(), b.corners());
    let c: Vec<f64> = ca.iter().zip(cb).map(|(p, q)| p + (q - p) * t).collect();
    // convex combination of valid boxes is valid
    BBox::new(c[0], c[1], c[2], c[3]).expect("interpolated box stays valid")
}

impl MotionState {
    /// Starts a track at its first observation.
    pub fn new(first: BBox, frame: u32, params: &KalmanParams) -> Self {
        let z = measurement(&first);
        let mut x = Vec7::zeros();
        x.fixed_rows_mut::<4>(0).copy_from(&z);
        let p = Mat7::from_diagonal(&Vec7::from(params.initial_covariance));
        let mut s = Self {
            x,
            p,
            q: Mat7::from_diagonal(&Vec7::from(params.process_noise)),
            r: Mat4::from_diagonal(&Vec4::from(params.measurement_noise)),
            frame,
            stash: None,
            history: vec![(frame, first)],
        };
        s.refresh_stash();
        s
    }

    pub fn frame(&self) -> u32 {
        self.frame
    }

    pub fn mean(&self) -> [f64; 7] {
        self.x.into()
    }

    pub fn covariance(&self) -> [[f64; 7]; 7] {
        let mut out = [[0.0; 7]; 7];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.p[(i, j)];
            }
        }
        out
    }

    /// Real observations, sorted by frame.
    pub fn history(&self) -> &[(u32, BBox)] {
        &self.history
    }

    pub fn last_observation(&self) -> Option<(u32, BBox)> {
        self.history.last().copied()
    }

    /// Box decoded from the current mean.
    pub fn current_box(&self) -> BBox {
        let s = self.x[2].max(MIN_SHAPE);
        let r = self.x[3].max(MIN_SHAPE);
        BBox::from_center_area_aspect(self.x[0], self.x[1], s, r).expect("clamped shape is positive")
    }

    /// Advances one frame under constant velocity and returns the predicted box.
    pub fn predict(&mut self) -> BBox {
        self.predict_step();
        self.current_box()
    }

    fn predict_step(&mut self) {
        if self.x[2] + self.x[6] <= 0.0 {
            self.x[6] = 0.0;
        }
        let f = f();
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + self.q;
        symmetrize(&mut self.p);
        self.frame += 1;
    }

    /// Measurement update for the current frame. Box validity is enforced
    /// by [`BBox`] construction, so every measurement is admissible.
    pub fn update(&mut self, z: BBox) {
        self.correct(&z);
        self.history.push((self.frame, z));
        self.refresh_stash();
    }

    fn correct(&mut self, z: &BBox) {
        let h = h();
        let y = measurement(z) - h * self.x;
        let s = h * self.p * h.transpose() + self.r;
        let s_inv =
            s.cholesky().map(|c| c.inverse()).or_else(|| s.pseudo_inverse(1e-12).ok()).unwrap_or_else(Mat4::zeros);
        let k = self.p * h.transpose() * s_inv;
        self.x += k * y;
        // Joseph form keeps P positive semi-definite
        let ikh = Mat7::identity() - k * h;
        self.p = ikh * self.p * ikh.transpose() + k * self.r * k.transpose();
        symmetrize(&mut self.p);
    }

    fn refresh_stash(&mut self) {
        self.stash = Some(Stash { x: self.x, p: self.p, frame: self.frame });
    }

    /// Re-associates a track after `frames_lost` frames without a real
    /// observation. The filter is rewound to the last observed posterior and
    /// replayed through `frames_lost - 1` virtual boxes interpolated between
    /// the last observation and `z`, then through `z`. Afterwards the state
    /// refers to `stash.frame + frames_lost`.
    pub fn oru_reupdate(&mut self, z: BBox, frames_lost: u32) {
        let (Some(stash), Some((_, last))) = (self.stash.clone(), self.last_observation()) else {
            self.update(z);
            return;
        };
        let k = frames_lost.max(1);
        self.x = stash.x;
        self.p = stash.p;
        self.frame = stash.frame;
        for i in 1..k {
            self.predict_step();
            self.correct(&lerp_box(&last, &z, i as f64 / k as f64));
        }
        self.predict_step();
        self.update(z);
    }

    /// Frames since the last real observation.
    pub fn frames_since_observation(&self) -> u32 {
        self.stash.as_ref().map_or(0, |s| self.frame - s.frame)
    }
}
