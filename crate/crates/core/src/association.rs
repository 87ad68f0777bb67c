//! Per-frame association: the multi-cue score matrix, assignment, the
//! two-stage confidence cascade, track lifecycle and the confidence-weighted
//! embedding update.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::max_score_assignment;
use crate::geometry::{angle_consistency, iou_matrix, track_direction, BBox, Direction};
use crate::io::TrackRow;
use crate::motion::{KalmanParams, MotionState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("detection confidence {dc} is below the embedding-update threshold {thresh}")]
    ConfidenceBelowThreshold { dc: f64, thresh: f64 },
    #[error("embedding lengths differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding has zero norm")]
    ZeroEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CueSwitches {
    pub angle: bool,
    pub appearance: bool,
    pub depth_seg: bool,
}

impl Default for CueSwitches {
    fn default() -> Self {
        Self { angle: true, appearance: true, depth_seg: true }
    }
}

/// Multipliers on the score terms; the unweighted sum is the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CueWeights {
    pub iou: f64,
    pub depth_seg: f64,
    pub appearance: f64,
}

impl Default for CueWeights {
    fn default() -> Self {
        Self { iou: 1.0, depth_seg: 1.0, appearance: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig {
    /// Detections strictly above this confidence enter the first stage.
    pub high_confidence: f64,
    /// Detections at or below this confidence are discarded.
    pub min_confidence: f64,
    /// Minimum total score of a first-stage pair.
    pub accept_threshold: f64,
    /// Minimum IoU of a second-stage pair.
    pub iou_threshold: f64,
    pub min_hits: u32,
    pub max_age: u32,
    pub angle_weight: f64,
    /// Frames between the reference and the last observation of a track's direction.
    pub direction_delta: u32,
    /// `T` of the embedding update.
    pub ema_base: f64,
    /// Confidence at which a new embedding is ignored entirely.
    pub ema_threshold: f64,
    pub oru: bool,
    pub cues: CueSwitches,
    pub weights: CueWeights,
    pub kalman: KalmanParams,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            high_confidence: 0.6,
            min_confidence: 0.1,
            accept_threshold: 0.3,
            iou_threshold: 0.3,
            min_hits: 3,
            max_age: 30,
            angle_weight: 0.2,
            direction_delta: 3,
            ema_base: 0.95,
            ema_threshold: 0.6,
            oru: true,
            cues: CueSwitches::default(),
            weights: CueWeights::default(),
            kalman: KalmanParams::default(),
        }
    }
}

/// Weight of the stored embedding: `T + (1 - T) (1 - (dc - thresh) / (1 - thresh))`.
pub fn ema_weight(dc: f64, base: f64, thresh: f64) -> f64 {
    base + (1.0 - base) * (1.0 - (dc - thresh) / (1.0 - thresh))
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>, AssociationError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(AssociationError::ZeroEmbedding);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Confidence-weighted blend of a stored unit embedding with a new one,
/// renormalized. A weight of 1 returns `prev` untouched.
pub fn update_track_embedding(
    prev: &[f64],
    new: &[f64],
    dc: f64,
    base: f64,
    thresh: f64,
) -> Result<Vec<f64>, AssociationError> {
    if dc < thresh {
        return Err(AssociationError::ConfidenceBelowThreshold { dc, thresh });
    }
    if prev.len() != new.len() {
        return Err(AssociationError::DimensionMismatch(prev.len(), new.len()));
    }
    let c = ema_weight(dc, base, thresh);
    if c >= 1.0 {
        return Ok(prev.to_vec());
    }
    let blended: Vec<f64> = prev.iter().zip(new).map(|(p, n)| c * p + (1.0 - c) * n).collect();
    normalize(&blended)
}

fn cosine_unit(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackState {
    Tentative,
    Confirmed,
    Lost,
    Dead,
}

/// Per-detection association inputs. Embeddings are unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCues {
    pub bbox: BBox,
    pub confidence: f64,
    pub appearance: Option<Vec<f64>>,
    /// Compared against the stored track embedding.
    pub depth_seg_match: Option<Vec<f64>>,
    /// Blended into the stored track embedding after a match.
    pub depth_seg_update: Option<Vec<f64>>,
}

impl DetectionCues {
    pub fn boxed(bbox: BBox, confidence: f64) -> Self {
        Self { bbox, confidence, appearance: None, depth_seg_match: None, depth_seg_update: None }
    }
}

#[derive(Debug, Clone)]
pub struct Tracklet {
    pub id: u64,
    pub motion: MotionState,
    pub appearance: Option<Vec<f64>>,
    pub depth_seg: Option<Vec<f64>>,
    pub hits: u32,
    pub age_since_update: u32,
    pub state: TrackState,
    /// Box predicted for the current frame.
    pub predicted: BBox,
    confirmed_once: bool,
}

impl Tracklet {
    pub fn is_live(&self) -> bool {
        self.state != TrackState::Dead
    }
}

/// Dense tracks x detections score matrix with its component terms.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    pub total: DMatrix<f64>,
    pub iou: DMatrix<f64>,
    pub angle: DMatrix<f64>,
    pub depth_seg: DMatrix<f64>,
    pub appearance: DMatrix<f64>,
    /// Whether the depth-seg / appearance term had both operands.
    pub depth_seg_valid: DMatrix<bool>,
    pub appearance_valid: DMatrix<bool>,
}

pub fn build_match_matrix(tracks: &[&Tracklet], dets: &[&DetectionCues], cfg: &AssociationConfig) -> MatchMatrix {
    let (t, d) = (tracks.len(), dets.len());
    let pred: Vec<BBox> = tracks.iter().map(|tr| tr.predicted).collect();
    let boxes: Vec<BBox> = dets.iter().map(|c| c.bbox).collect();
    let iou = iou_matrix(&pred, &boxes) * cfg.weights.iou;

    let mut angle = DMatrix::zeros(t, d);
    if cfg.cues.angle {
        for (i, tr) in tracks.iter().enumerate() {
            let history = tr.motion.history();
            let dir = track_direction(history, cfg.direction_delta);
            let Some(&(_, last)) = history.last() else { continue };
            if !dir.is_defined() {
                continue;
            }
            for (j, c) in dets.iter().enumerate() {
                let cand = Direction::between(last.center(), c.bbox.center());
                angle[(i, j)] = angle_consistency(&dir, &cand, cfg.angle_weight);
            }
        }
    }

    let cosine_term = |enabled: bool,
                       weight: f64,
                       tv: &dyn Fn(&Tracklet) -> Option<&Vec<f64>>,
                       dv: &dyn Fn(&DetectionCues) -> Option<&Vec<f64>>| {
        let mut m = DMatrix::zeros(t, d);
        let mut valid = DMatrix::from_element(t, d, false);
        if enabled {
            for (i, tr) in tracks.iter().enumerate() {
                let Some(a) = tv(tr) else { continue };
                for (j, c) in dets.iter().enumerate() {
                    if let Some(b) = dv(c).filter(|b| b.len() == a.len()) {
                        m[(i, j)] = weight * cosine_unit(a, b);
                        valid[(i, j)] = true;
                    }
                }
            }
        }
        (m, valid)
    };
    let (depth_seg, depth_seg_valid) =
        cosine_term(cfg.cues.depth_seg, cfg.weights.depth_seg, &|tr| tr.depth_seg.as_ref(), &|c| {
            c.depth_seg_match.as_ref()
        });
    let (appearance, appearance_valid) =
        cosine_term(cfg.cues.appearance, cfg.weights.appearance, &|tr| tr.appearance.as_ref(), &|c| {
            c.appearance.as_ref()
        });

    let total = &iou + &angle + &depth_seg + &appearance;
    MatchMatrix { total, iou, angle, depth_seg, appearance, depth_seg_valid, appearance_valid }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Maximum-total matching; pairs scoring below `threshold` are dissolved.
pub fn solve_assignment(score: &DMatrix<f64>, threshold: f64) -> Assignment {
    let (n, m) = score.shape();
    let pairs: Vec<(usize, usize)> = max_score_assignment(score)
        .expect("association scores are finite")
        .into_iter()
        .filter(|&(i, j)| score[(i, j)] >= threshold)
        .collect();
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; m];
    for &(i, j) in &pairs {
        row_used[i] = true;
        col_used[j] = true;
    }
    Assignment {
        unmatched_rows: (0..n).filter(|&i| !row_used[i]).collect(),
        unmatched_cols: (0..m).filter(|&j| !col_used[j]).collect(),
        pairs,
    }
}

/// Online tracker over a sequence of frames.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: AssociationConfig,
    tracks: Vec<Tracklet>,
    next_id: u64,
    frame: u32,
    busy: Duration,
    frames_processed: u64,
}

impl Tracker {
    pub fn new(cfg: AssociationConfig) -> Self {
        Self { cfg, tracks: Vec::new(), next_id: 1, frame: 0, busy: Duration::ZERO, frames_processed: 0 }
    }

    pub fn config(&self) -> &AssociationConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[Tracklet] {
        &self.tracks
    }

    /// Wall time spent inside [`Tracker::step`].
    pub fn association_time(&self) -> Duration {
        self.busy
    }

    pub fn frames_processed(&self) -> u64 {
        self.frames_processed
    }

    /// Processes frame `frame` (strictly after the previous one) and returns
    /// the output rows of confirmed tracks observed in it.
    pub fn step(&mut self, frame: u32, dets: &[DetectionCues]) -> Vec<TrackRow> {
        let start = Instant::now();
        let rows = self.associate(frame, dets);
        self.busy += start.elapsed();
        self.frames_processed += 1;
        rows
    }

    fn associate(&mut self, frame: u32, dets: &[DetectionCues]) -> Vec<TrackRow> {
        assert!(frame > self.frame, "frames must be processed in increasing order");
        let gap = frame - self.frame;
        self.frame = frame;
        for tr in &mut self.tracks {
            for _ in 0..gap {
                tr.predicted = tr.motion.predict();
            }
        }
        let cfg = &self.cfg;
        let live: Vec<usize> = (0..self.tracks.len()).collect();
        let high: Vec<usize> = (0..dets.len()).filter(|&j| dets[j].confidence > cfg.high_confidence).collect();
        let low: Vec<usize> = (0..dets.len())
            .filter(|&j| dets[j].confidence > cfg.min_confidence && dets[j].confidence <= cfg.high_confidence)
            .collect();

        // stage 1: confident detections, all cues
        let tr_refs: Vec<&Tracklet> = live.iter().map(|&i| &self.tracks[i]).collect();
        let det_refs: Vec<&DetectionCues> = high.iter().map(|&j| &dets[j]).collect();
        let m = build_match_matrix(&tr_refs, &det_refs, cfg);
        let a1 = solve_assignment(&m.total, cfg.accept_threshold);
        let mut matches: Vec<(usize, usize)> = a1.pairs.iter().map(|&(i, j)| (live[i], high[j])).collect();

        // stage 2: IoU only, over leftover tracks and every leftover detection
        let rest_tracks: Vec<usize> = a1.unmatched_rows.iter().map(|&i| live[i]).collect();
        let mut rest_dets: Vec<usize> = low;
        rest_dets.extend(a1.unmatched_cols.iter().map(|&j| high[j]));
        rest_dets.sort_unstable();
        let pred: Vec<BBox> = rest_tracks.iter().map(|&i| self.tracks[i].predicted).collect();
        let boxes: Vec<BBox> = rest_dets.iter().map(|&j| dets[j].bbox).collect();
        let a2 = solve_assignment(&iou_matrix(&pred, &boxes), cfg.iou_threshold);
        matches.extend(a2.pairs.iter().map(|&(i, j)| (rest_tracks[i], rest_dets[j])));

        let mut matched_track = vec![false; self.tracks.len()];
        let mut matched_det = vec![false; dets.len()];
        for &(ti, dj) in &matches {
            matched_track[ti] = true;
            matched_det[dj] = true;
            self.apply_match(ti, &dets[dj]);
        }
        for (ti, tr) in self.tracks.iter_mut().enumerate() {
            if !matched_track[ti] {
                tr.age_since_update += 1;
                tr.state = if tr.age_since_update > self.cfg.max_age { TrackState::Dead } else { TrackState::Lost };
            }
        }
        for &j in &high {
            if !matched_det[j] {
                self.spawn(&dets[j]);
            }
        }
        self.tracks.retain(Tracklet::is_live);

        let mut rows: Vec<TrackRow> = self
            .tracks
            .iter()
            .filter(|t| t.state == TrackState::Confirmed && t.age_since_update == 0)
            .map(|t| TrackRow::from_bbox(frame, t.id, &t.motion.current_box(), 1.0))
            .collect();
        rows.sort_by_key(|r| r.id);
        rows
    }

    fn apply_match(&mut self, ti: usize, det: &DetectionCues) {
        let cfg = &self.cfg;
        let tr = &mut self.tracks[ti];
        let lost_for = tr.motion.frames_since_observation();
        if cfg.oru && lost_for > 1 {
            tr.motion.oru_reupdate(det.bbox, lost_for);
        } else {
            tr.motion.update(det.bbox);
        }
        if det.confidence >= cfg.ema_threshold {
            blend(&mut tr.appearance, det.appearance.as_ref(), det.confidence, cfg);
            blend(&mut tr.depth_seg, det.depth_seg_update.as_ref(), det.confidence, cfg);
        }
        tr.hits += 1;
        tr.age_since_update = 0;
        if tr.hits >= cfg.min_hits {
            tr.confirmed_once = true;
        }
        tr.state = if tr.confirmed_once { TrackState::Confirmed } else { TrackState::Tentative };
    }

    fn spawn(&mut self, det: &DetectionCues) {
        let motion = MotionState::new(det.bbox, self.frame, &self.cfg.kalman);
        let confirmed_once = self.cfg.min_hits <= 1;
        self.tracks.push(Tracklet {
            id: self.next_id,
            predicted: det.bbox,
            motion,
            appearance: det.appearance.clone(),
            depth_seg: det.depth_seg_update.clone(),
            hits: 1,
            age_since_update: 0,
            state: if confirmed_once { TrackState::Confirmed } else { TrackState::Tentative },
            confirmed_once,
        });
        self.next_id += 1;
    }
}

fn blend(stored: &mut Option<Vec<f64>>, new: Option<&Vec<f64>>, dc: f64, cfg: &AssociationConfig) {
    let Some(new) = new else { return };
    *stored = match stored.take() {
        None => Some(new.clone()),
        Some(prev) => Some(update_track_embedding(&prev, new, dc, cfg.ema_base, cfg.ema_threshold).unwrap_or(prev)),
    };
}
