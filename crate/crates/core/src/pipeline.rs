//! Bundle-to-tracks wiring: per-detection cue extraction (fusion, encoder,
//! appearance), the tracker loop and its timing, and encoder training pairs.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{normalize, AssociationConfig, DetectionCues, Tracker};
use crate::encoder::{EncoderError, EncoderState, TrainingPair};
use crate::fusion::{depth_scale, fuse_with_scale, FusedObjectMap, FusionError};
use crate::geometry::BBox;
use crate::grid::Grid;
use crate::io::{Frame, SequenceBundle, TrackRow};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("the depth-segmentation cue is enabled but no encoder was supplied")]
    MissingEncoder,
    #[error("frame {frame}: {source}")]
    Fusion { frame: u32, source: FusionError },
    #[error("frame {frame}: {source}")]
    Encoder { frame: u32, source: EncoderError },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionOptions {
    /// Crop growth per side, as a fraction of the mask extent.
    pub pad_frac: f64,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self { pad_frac: 0.1 }
    }
}

/// Tight pixel bounds of the set pixels of a mask.
pub fn mask_bbox(mask: &Grid<u8>) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for (x, &v) in mask.row(y).iter().enumerate() {
            if v != 0 {
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).expect("non-empty bounds"))
}

/// Fuses `mask` with `depth`, cropping around the mask's own extent so the
/// same silhouette yields the same map wherever the detector box lands.
/// Returns `None` for an empty mask.
fn fuse_mask(
    depth: &Grid<f32>,
    scale: f64,
    mask: &Grid<u8>,
    resolution: usize,
    opts: &FusionOptions,
) -> Result<Option<FusedObjectMap>, FusionError> {
    let Some(bbox) = mask_bbox(mask) else { return Ok(None) };
    let map = fuse_with_scale(depth, scale, mask, &bbox, resolution, opts.pad_frac)?;
    Ok((!map.empty_mask).then_some(map))
}

/// Wall time of the two tracking stages, measured separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub frames: u64,
    pub detections: u64,
    pub embeddings: u64,
    /// Matrix build, assignment and lifecycle only.
    pub association_seconds: f64,
    pub association_fps: f64,
    /// Fusion plus encoder inference.
    pub embedding_seconds: f64,
    pub embedding_fps: f64,
}

fn rate(n: u64, d: Duration) -> f64 {
    let s = d.as_secs_f64();
    if s > 0.0 {
        n as f64 / s
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone)]
pub struct TrackOutput {
    pub rows: Vec<TrackRow>,
    pub timing: TimingReport,
}

/// Builds association inputs for one frame.
///
/// The depth-segmentation match vector embeds the detection's mask
/// propagated back to `t-1`, fused with the `t-1` depth, so it is compared
/// against track embeddings built from `t-1` observations. The update vector
/// embeds the detection's own mask at `t`. Missing masks, depth or empty
/// masks leave the cue absent for that detection.
pub fn frame_cues(
    frame: &Frame,
    prev_depth: Option<&Grid<f32>>,
    encoder: Option<&EncoderState>,
    cfg: &AssociationConfig,
    opts: &FusionOptions,
) -> Result<(Vec<DetectionCues>, u64), PipelineError> {
    let t = frame.index;
    let mut cues: Vec<DetectionCues> =
        frame.detections.iter().map(|d| DetectionCues::boxed(d.bbox, d.confidence)).collect();
    if cfg.cues.appearance {
        if let Some(rows) = &frame.appearance {
            for (c, row) in cues.iter_mut().zip(rows) {
                let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                c.appearance = normalize(&v).ok();
            }
        }
    }
    if !cfg.cues.depth_seg {
        return Ok((cues, 0));
    }
    let encoder = encoder.ok_or(PipelineError::MissingEncoder)?;
    let res = encoder.config().resolution;
    let fusion = |source| PipelineError::Fusion { frame: t, source };

    // (detection, is_update) per fused map, embedded in one batch
    let mut slots = Vec::new();
    let mut maps = Vec::new();
    if let Some(depth) = &frame.depth {
        let scale = depth_scale(depth);
        for (j, _) in frame.detections.iter().enumerate() {
            if let Some(m) = frame.mask_at(j, t) {
                if let Some(map) = fuse_mask(depth, scale, &m.mask, res, opts).map_err(fusion)? {
                    slots.push((j, true));
                    maps.push(map.with_source(t, j));
                }
            }
        }
    }
    if let (Some(depth), Some(prev)) = (prev_depth, t.checked_sub(1).filter(|&p| p > 0)) {
        let scale = depth_scale(depth);
        for (j, _) in frame.detections.iter().enumerate() {
            if let Some(m) = frame.mask_at(j, prev) {
                if let Some(map) = fuse_mask(depth, scale, &m.mask, res, opts).map_err(fusion)? {
                    slots.push((j, false));
                    maps.push(map.with_source(prev, j));
                }
            }
        }
    }
    let embeddings = encoder.embed_many(&maps).map_err(|source| PipelineError::Encoder { frame: t, source })?;
    for (&(j, update), e) in slots.iter().zip(embeddings) {
        let v = normalize(&e.0).ok();
        if update {
            cues[j].depth_seg_update = v;
        } else {
            cues[j].depth_seg_match = v;
        }
    }
    Ok((cues, maps.len() as u64))
}

/// Runs the tracker over every frame of `bundle`.
pub fn track_sequence(
    bundle: &SequenceBundle,
    encoder: Option<&EncoderState>,
    cfg: &AssociationConfig,
    opts: &FusionOptions,
) -> Result<TrackOutput, PipelineError> {
    let mut tracker = Tracker::new(cfg.clone());
    let mut rows = Vec::new();
    let mut embed_time = Duration::ZERO;
    let mut embeddings = 0;
    let mut prev_depth = None;
    for frame in &bundle.frames {
        let start = Instant::now();
        let (cues, n) = frame_cues(frame, prev_depth, encoder, cfg, opts)?;
        embed_time += start.elapsed();
        embeddings += n;
        rows.extend(tracker.step(frame.index, &cues));
        prev_depth = frame.depth.as_ref();
    }
    let frames = tracker.frames_processed();
    let timing = TimingReport {
        frames,
        detections: bundle.num_detections() as u64,
        embeddings,
        association_seconds: tracker.association_time().as_secs_f64(),
        association_fps: rate(frames, tracker.association_time()),
        embedding_seconds: embed_time.as_secs_f64(),
        embedding_fps: rate(frames, embed_time),
    };
    Ok(TrackOutput { rows, timing })
}

/// One object's fused maps at `t-1` and `t`, with its detection index at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledPair {
    pub frame: u32,
    pub det: usize,
    pub pair: TrainingPair,
}

/// Consecutive-frame map pairs for encoder training. Correspondence comes
/// from each detection's backward-propagated mask, so no identities are
/// needed.
pub fn training_pairs(
    bundle: &SequenceBundle,
    resolution: usize,
    opts: &FusionOptions,
) -> Result<Vec<LabelledPair>, PipelineError> {
    let mut out = Vec::new();
    for w in bundle.frames.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        let (Some(dp), Some(dc)) = (&prev.depth, &cur.depth) else { continue };
        let (sp, sc) = (depth_scale(dp), depth_scale(dc));
        let fusion = |source| PipelineError::Fusion { frame: cur.index, source };
        for j in 0..cur.detections.len() {
            let (Some(mp), Some(mc)) = (cur.mask_at(j, prev.index), cur.mask_at(j, cur.index)) else { continue };
            let a = fuse_mask(dp, sp, &mp.mask, resolution, opts).map_err(fusion)?;
            let b = fuse_mask(dc, sc, &mc.mask, resolution, opts).map_err(fusion)?;
            if let (Some(a), Some(b)) = (a, b) {
                let pair = TrainingPair { prev: a.values.into_vec(), curr: b.values.into_vec() };
                out.push(LabelledPair { frame: cur.index, det: j, pair });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::sim::{generate_sequence, SimConfig};

    #[test]
    fn mask_bounds() {
        let mut m = Grid::filled(6, 5, 0u8);
        assert!(mask_bbox(&m).is_none());
        m.set(1, 2, 1);
        m.set(3, 4, 1);
        assert_eq!(mask_bbox(&m).unwrap().corners(), [1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn depth_seg_requires_an_encoder() {
        let bundle = generate_sequence(&SimConfig { frames: 3, ..SimConfig::default() }).unwrap();
        let err = track_sequence(&bundle, None, &AssociationConfig::default(), &FusionOptions::default());
        assert!(matches!(err, Err(PipelineError::MissingEncoder)));
    }

    #[test]
    fn tracks_an_easy_sequence() {
        let sim = SimConfig { frames: 20, objects: 3, ..SimConfig::default() };
        let bundle = generate_sequence(&sim).unwrap();
        let enc = EncoderState::new(EncoderConfig::tiny(), 1).unwrap();
        let out =
            track_sequence(&bundle, Some(&enc), &AssociationConfig::default(), &FusionOptions::default()).unwrap();
        assert!(!out.rows.is_empty());
        assert_eq!(out.timing.frames, 20);
        assert!(out.timing.embeddings > 0);
        let again =
            track_sequence(&bundle, Some(&enc), &AssociationConfig::default(), &FusionOptions::default()).unwrap();
        assert_eq!(out.rows, again.rows);
    }

    #[test]
    fn backward_mask_pairs_cover_tracked_objects() {
        let sim = SimConfig { frames: 5, objects: 2, ..SimConfig::default() };
        let bundle = generate_sequence(&sim).unwrap();
        let pairs = training_pairs(&bundle, 16, &FusionOptions::default()).unwrap();
        assert!(!pairs.is_empty() && pairs.len() <= 8);
        assert!(pairs.iter().all(|p| p.pair.prev.len() == 256 && p.pair.curr.len() == 256));
    }
}
