//! Sequence bundle directories.
//!
//! ```text
//! det.txt                          MOTChallenge detections
//! gt.txt                           optional ground truth
//! manifest.json                    frame size, frame count, mask index
//! depth/{frame:06}.tnsr            H x W f32 depth
//! masks/{frame:06}/{det:04}.tnsr   H x W u8 mask of detection `det` of `frame`
//! appearance/{frame:06}.tnsr       N x D f32 appearance embeddings
//! ```
//!
//! Each manifest mask entry carries the frame the mask was segmented in
//! (`ref_frame`). A detection may have masks at several reference frames;
//! the canonical file holds the first one listed and any further ones are
//! stored as `{det:04}_{ref_frame:06}.tnsr`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mot::{self, DetRecord, TrackRow};
use super::tensor::{read_tensor, write_tensor, Tensor, TensorData};
use super::{atomic_write, IoError};
use crate::geometry::BBox;
use crate::grid::Grid;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    /// Index of the owning detection within its frame.
    pub det: usize,
    /// Frame whose image the mask was segmented in.
    pub ref_frame: u32,
    pub mask: Grid<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    /// 1-based frame number.
    pub index: u32,
    pub detections: Vec<Detection>,
    pub depth: Option<Grid<f32>>,
    pub masks: Vec<ObjectMask>,
    /// One row per detection when present.
    pub appearance: Option<Vec<Vec<f32>>>,
}

impl Frame {
    pub fn masks_of(&self, det: usize) -> impl Iterator<Item = &ObjectMask> {
        self.masks.iter().filter(move |m| m.det == det)
    }

    pub fn mask_at(&self, det: usize, ref_frame: u32) -> Option<&ObjectMask> {
        self.masks_of(det).find(|m| m.ref_frame == ref_frame)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceBundle {
    /// `(width, height)` shared by depth maps and masks.
    pub frame_size: Option<(usize, usize)>,
    /// `frames[i].index == i + 1`.
    pub frames: Vec<Frame>,
    pub ground_truth: Option<Vec<TrackRow>>,
}

impl SequenceBundle {
    pub fn frame(&self, index: u32) -> Option<&Frame> {
        index.checked_sub(1).and_then(|i| self.frames.get(i as usize))
    }

    pub fn num_detections(&self) -> usize {
        self.frames.iter().map(|f| f.detections.len()).sum()
    }

    /// Re-checks every cross-reference invariant.
    pub fn validate(&self) -> Result<(), IoError> {
        let n = self.frames.len() as u32;
        let mut app_dim = None;
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i as u32 + 1 {
                return Err(IoError::IndexMismatch(format!("frame slot {i} holds frame {}", f.index)));
            }
            for d in &f.detections {
                if !(0.0..=1.0).contains(&d.confidence) {
                    return Err(IoError::InvalidValue(format!(
                        "frame {}: confidence {} outside [0, 1]",
                        f.index, d.confidence
                    )));
                }
            }
            if let Some(depth) = &f.depth {
                self.check_size(f.index, "depth", depth.width(), depth.height())?;
                if let Some(v) = depth.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Err(IoError::InvalidValue(format!("frame {}: depth value {v}", f.index)));
                }
            }
            let mut seen = HashSet::new();
            for m in &f.masks {
                if m.det >= f.detections.len() {
                    return Err(IoError::IndexMismatch(format!(
                        "frame {}: mask references detection {} of {}",
                        f.index,
                        m.det,
                        f.detections.len()
                    )));
                }
                if m.ref_frame == 0 || m.ref_frame > n {
                    return Err(IoError::IndexMismatch(format!(
                        "frame {}: mask of detection {} references frame {}",
                        f.index, m.det, m.ref_frame
                    )));
                }
                if !seen.insert((m.det, m.ref_frame)) {
                    return Err(IoError::IndexMismatch(format!(
                        "frame {}: duplicate mask for detection {} at frame {}",
                        f.index, m.det, m.ref_frame
                    )));
                }
                self.check_size(f.index, "mask", m.mask.width(), m.mask.height())?;
            }
            if let Some(rows) = &f.appearance {
                if rows.len() != f.detections.len() {
                    return Err(IoError::IndexMismatch(format!(
                        "frame {}: {} appearance rows for {} detections",
                        f.index,
                        rows.len(),
                        f.detections.len()
                    )));
                }
                for r in rows {
                    if *app_dim.get_or_insert(r.len()) != r.len() {
                        return Err(IoError::DimensionMismatch(format!(
                            "frame {}: appearance dim {} differs from {}",
                            f.index,
                            r.len(),
                            app_dim.unwrap()
                        )));
                    }
                    if r.iter().any(|v| !v.is_finite()) {
                        return Err(IoError::InvalidValue(format!("frame {}: non-finite appearance", f.index)));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_size(&self, frame: u32, what: &str, w: usize, h: usize) -> Result<(), IoError> {
        match self.frame_size {
            Some(size) if size == (w, h) => Ok(()),
            Some((ew, eh)) => {
                Err(IoError::DimensionMismatch(format!("frame {frame}: {what} is {w}x{h}, manifest says {ew}x{eh}")))
            }
            None => Err(IoError::Manifest(format!("frame {frame}: {what} present but frame size unknown"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    width: usize,
    height: usize,
    num_frames: u32,
    #[serde(default)]
    masks: Vec<MaskEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    frame: u32,
    det: usize,
    ref_frame: u32,
    file: String,
}

fn tensor_at(path: &Path) -> Result<Tensor, IoError> {
    read_tensor(path).map_err(|source| IoError::Tensor { path: path.to_path_buf(), source })
}

fn frame_file(dir: &Path, frame: u32) -> std::path::PathBuf {
    dir.join(format!("{frame:06}.tnsr"))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<SequenceBundle, IoError> {
    let dir = dir.as_ref();
    let det_path = dir.join("det.txt");
    let det_text = fs::read_to_string(&det_path).map_err(|e| IoError::io(&det_path, e))?;
    let records = mot::parse_detections(&det_text).map_err(|e| e.in_file(&det_path))?;

    let manifest_path = dir.join("manifest.json");
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| IoError::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| IoError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(IoError::Manifest(format!("unsupported version {}", m.version)));
        }
        Some(m)
    } else {
        None
    };

    let gt_path = dir.join("gt.txt");
    let ground_truth = if gt_path.exists() { Some(mot::read_tracks(&gt_path)?) } else { None };

    let num_frames = records.iter().map(|r| r.frame).chain(manifest.as_ref().map(|m| m.num_frames)).max().unwrap_or(0);
    let mut frames: Vec<Frame> = (1..=num_frames).map(|index| Frame { index, ..Default::default() }).collect();
    for r in &records {
        frames[r.frame as usize - 1].detections.push(Detection { bbox: r.bbox, confidence: r.confidence });
    }

    let mut frame_size = manifest.as_ref().map(|m| (m.width, m.height));

    let depth_dir = dir.join("depth");
    if depth_dir.is_dir() {
        for f in frames.iter_mut() {
            let path = frame_file(&depth_dir, f.index);
            if !path.exists() {
                continue;
            }
            let t = tensor_at(&path)?;
            let (h, w) = match t.dims() {
                &[h, w] => (h, w),
                d => return Err(IoError::DimensionMismatch(format!("{}: depth dims {d:?}", path.display()))),
            };
            let TensorData::F32(data) = t.into_data() else {
                return Err(IoError::InvalidValue(format!("{}: depth must be f32", path.display())));
            };
            frame_size.get_or_insert((w, h));
            f.depth = Some(Grid::from_vec(w, h, data).unwrap());
        }
    }

    if let Some(m) = &manifest {
        for e in &m.masks {
            let slot = frames.get_mut(e.frame.wrapping_sub(1) as usize).ok_or_else(|| {
                IoError::IndexMismatch(format!("mask {} references frame {} of {num_frames}", e.file, e.frame))
            })?;
            let path = dir.join(&e.file);
            let t = tensor_at(&path)?;
            let (h, w) = match t.dims() {
                &[h, w] => (h, w),
                d => return Err(IoError::DimensionMismatch(format!("{}: mask dims {d:?}", path.display()))),
            };
            let TensorData::U8(data) = t.into_data() else {
                return Err(IoError::InvalidValue(format!("{}: mask must be u8", path.display())));
            };
            slot.masks.push(ObjectMask {
                det: e.det,
                ref_frame: e.ref_frame,
                mask: Grid::from_vec(w, h, data).unwrap(),
            });
        }
    } else if dir.join("masks").is_dir() {
        return Err(IoError::Manifest("masks/ present without manifest.json".into()));
    }

    let app_dir = dir.join("appearance");
    if app_dir.is_dir() {
        for f in frames.iter_mut() {
            let path = frame_file(&app_dir, f.index);
            if !path.exists() {
                if f.detections.is_empty() {
                    f.appearance = Some(Vec::new());
                    continue;
                }
                return Err(IoError::IndexMismatch(format!(
                    "frame {} has {} detections but no appearance file",
                    f.index,
                    f.detections.len()
                )));
            }
            let t = tensor_at(&path)?;
            let (n, d) = match t.dims() {
                &[n, d] => (n, d),
                dims => {
                    return Err(IoError::DimensionMismatch(format!("{}: appearance dims {dims:?}", path.display())))
                }
            };
            let TensorData::F32(data) = t.into_data() else {
                return Err(IoError::InvalidValue(format!("{}: appearance must be f32", path.display())));
            };
            let rows = if d == 0 { vec![Vec::new(); n] } else { data.chunks_exact(d).map(<[f32]>::to_vec).collect() };
            f.appearance = Some(rows);
        }
    }

    let bundle = SequenceBundle { frame_size, frames, ground_truth };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a bundle directory that [`load_bundle`] reads back unchanged.
pub fn save_bundle(bundle: &SequenceBundle, dir: impl AsRef<Path>) -> Result<(), IoError> {
    let dir = dir.as_ref();
    bundle.validate()?;
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| IoError::io(p, e));
    let put =
        |p: &Path, t: Tensor| write_tensor(p, &t).map_err(|source| IoError::Tensor { path: p.to_path_buf(), source });
    mkdir(dir)?;

    let records: Vec<DetRecord> = bundle
        .frames
        .iter()
        .flat_map(|f| f.detections.iter().map(|d| DetRecord { frame: f.index, bbox: d.bbox, confidence: d.confidence }))
        .collect();
    atomic_write(&dir.join("det.txt"), mot::format_detections(&records).as_bytes())?;

    if let Some(gt) = &bundle.ground_truth {
        mot::write_results(gt, dir.join("gt.txt"))?;
    }

    if bundle.frames.iter().any(|f| f.depth.is_some()) {
        let depth_dir = dir.join("depth");
        mkdir(&depth_dir)?;
        for f in &bundle.frames {
            if let Some(d) = &f.depth {
                let t = Tensor::new(vec![d.height(), d.width()], TensorData::F32(d.data().to_vec())).unwrap();
                put(&frame_file(&depth_dir, f.index), t)?;
            }
        }
    }

    if bundle.frames.iter().any(|f| f.appearance.is_some()) {
        let app_dir = dir.join("appearance");
        mkdir(&app_dir)?;
        for f in &bundle.frames {
            if let Some(rows) = &f.appearance {
                let d = rows.first().map_or(0, Vec::len);
                let flat: Vec<f32> = rows.iter().flatten().copied().collect();
                let t = Tensor::new(vec![rows.len(), d], TensorData::F32(flat)).unwrap();
                put(&frame_file(&app_dir, f.index), t)?;
            }
        }
    }

    let mut entries = Vec::new();
    for f in &bundle.frames {
        if f.masks.is_empty() {
            continue;
        }
        let frame_dir = dir.join("masks").join(format!("{:06}", f.index));
        mkdir(&frame_dir)?;
        let mut first_for: BTreeMap<usize, u32> = BTreeMap::new();
        for m in &f.masks {
            let canonical = *first_for.entry(m.det).or_insert(m.ref_frame) == m.ref_frame;
            let name =
                if canonical { format!("{:04}.tnsr", m.det) } else { format!("{:04}_{:06}.tnsr", m.det, m.ref_frame) };
            let t = Tensor::new(vec![m.mask.height(), m.mask.width()], TensorData::U8(m.mask.data().to_vec())).unwrap();
            put(&frame_dir.join(&name), t)?;
            entries.push(MaskEntry {
                frame: f.index,
                det: m.det,
                ref_frame: m.ref_frame,
                file: format!("masks/{:06}/{name}", f.index),
            });
        }
    }

    if let Some((width, height)) = bundle.frame_size {
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            width,
            height,
            num_frames: bundle.frames.len() as u32,
            masks: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| IoError::Manifest(e.to_string()))?;
        atomic_write(&dir.join("manifest.json"), text.as_bytes())?;
    }
    Ok(())
}
