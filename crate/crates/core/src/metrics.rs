//! HOTA, CLEAR MOTA and IDF1 over ground-truth and predicted track rows.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::max_score_assignment;
use crate::geometry::{iou_matrix, BBox};
use crate::io::TrackRow;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("{which}: id {id} appears twice in frame {frame}")]
    DuplicateId { which: &'static str, frame: u32, id: u64 },
}

/// Carry-over bonus that makes CLEAR matching prefer last frame's pairs.
const CONTINUITY_BONUS: f64 = 1000.0;

pub fn alphas() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// One frame with dense id indices into the sequence-wide id tables.
struct FrameData {
    gt: Vec<usize>,
    pred: Vec<usize>,
    iou: DMatrix<f64>,
}

struct Sequence {
    frames: Vec<FrameData>,
    num_gt_ids: usize,
    num_pred_ids: usize,
    num_gt: u64,
    num_pred: u64,
}

/// Per-frame `(dense id, box)` lists.
type FrameIndex = BTreeMap<u32, Vec<(usize, BBox)>>;

fn index_rows(rows: &[TrackRow], which: &'static str) -> Result<(FrameIndex, usize), MetricsError> {
    let mut ids: HashMap<u64, usize> = HashMap::new();
    let mut sorted: Vec<&TrackRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.frame, r.id));
    for r in &sorted {
        let n = ids.len();
        ids.entry(r.id).or_insert(n);
    }
    let mut frames: BTreeMap<u32, Vec<(usize, BBox)>> = BTreeMap::new();
    for w in sorted.windows(2) {
        if w[0].frame == w[1].frame && w[0].id == w[1].id {
            return Err(MetricsError::DuplicateId { which, frame: w[0].frame, id: w[0].id });
        }
    }
    for r in sorted {
        frames.entry(r.frame).or_default().push((ids[&r.id], r.bbox()));
    }
    Ok((frames, ids.len()))
}

fn prepare(gt: &[TrackRow], pred: &[TrackRow]) -> Result<Sequence, MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let (g, num_gt_ids) = index_rows(gt, "ground truth")?;
    let (p, num_pred_ids) = index_rows(pred, "prediction")?;
    let mut keys: Vec<u32> = g.keys().chain(p.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let empty = Vec::new();
    let frames = keys
        .into_iter()
        .map(|f| {
            let gf = g.get(&f).unwrap_or(&empty);
            let pf = p.get(&f).unwrap_or(&empty);
            let gb: Vec<BBox> = gf.iter().map(|x| x.1).collect();
            let pb: Vec<BBox> = pf.iter().map(|x| x.1).collect();
            FrameData {
                gt: gf.iter().map(|x| x.0).collect(),
                pred: pf.iter().map(|x| x.0).collect(),
                iou: iou_matrix(&gb, &pb),
            }
        })
        .collect();
    Ok(Sequence { frames, num_gt_ids, num_pred_ids, num_gt: gt.len() as u64, num_pred: pred.len() as u64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clear {
    pub mota: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub idsw: u64,
}

fn clear_of(seq: &Sequence, thresh: f64) -> Clear {
    let mut last_match: Vec<Option<usize>> = vec![None; seq.num_gt_ids];
    let mut prev_step: Vec<Option<usize>> = vec![None; seq.num_gt_ids];
    let (mut tp, mut idsw) = (0u64, 0u64);
    for fr in &seq.frames {
        let mut score = DMatrix::zeros(fr.gt.len(), fr.pred.len());
        for (i, &g) in fr.gt.iter().enumerate() {
            for (j, &p) in fr.pred.iter().enumerate() {
                let v = fr.iou[(i, j)];
                if v >= thresh - f64::EPSILON {
                    score[(i, j)] = v + if prev_step[g] == Some(p) { CONTINUITY_BONUS } else { 0.0 };
                }
            }
        }
        let mut step = vec![None; seq.num_gt_ids];
        for (i, j) in max_score_assignment(&score).expect("IoU scores are finite") {
            if score[(i, j)] <= 0.0 {
                continue;
            }
            let (g, p) = (fr.gt[i], fr.pred[j]);
            if last_match[g].is_some_and(|q| q != p) {
                idsw += 1;
            }
            last_match[g] = Some(p);
            step[g] = Some(p);
            tp += 1;
        }
        prev_step = step;
    }
    let fp = seq.num_pred - tp;
    let fn_ = seq.num_gt - tp;
    let mota = 1.0 - (fp + fn_ + idsw) as f64 / seq.num_gt as f64;
    Clear { mota, tp, fp, fn_, idsw }
}

/// CLEAR MOT accuracy. MOTA is not clamped and goes negative when errors
/// outnumber ground-truth detections.
pub fn clear_mota(gt: &[TrackRow], pred: &[TrackRow], iou_thresh: f64) -> Result<Clear, MetricsError> {
    Ok(clear_of(&prepare(gt, pred)?, iou_thresh))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub idf1: f64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

fn identity_of(seq: &Sequence, thresh: f64) -> Identity {
    let mut overlap = DMatrix::<f64>::zeros(seq.num_gt_ids, seq.num_pred_ids);
    for fr in &seq.frames {
        for (i, &g) in fr.gt.iter().enumerate() {
            for (j, &p) in fr.pred.iter().enumerate() {
                if fr.iou[(i, j)] >= thresh - f64::EPSILON {
                    overlap[(g, p)] += 1.0;
                }
            }
        }
    }
    let idtp: u64 =
        max_score_assignment(&overlap).expect("counts are finite").iter().map(|&(g, p)| overlap[(g, p)] as u64).sum();
    let idfp = seq.num_pred - idtp;
    let idfn = seq.num_gt - idtp;
    let idf1 = 2.0 * idtp as f64 / (2 * idtp + idfp + idfn) as f64;
    Identity { idf1, idtp, idfp, idfn }
}

/// Identity F1 under the globally optimal one-to-one trajectory matching.
pub fn idf1(gt: &[TrackRow], pred: &[TrackRow], iou_thresh: f64) -> Result<Identity, MetricsError> {
    Ok(identity_of(&prepare(gt, pred)?, iou_thresh))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hota {
    pub hota: f64,
    pub det_a: f64,
    pub ass_a: f64,
    pub alphas: Vec<f64>,
    pub hota_alpha: Vec<f64>,
    pub det_a_alpha: Vec<f64>,
    pub ass_a_alpha: Vec<f64>,
    pub tp_alpha: Vec<u64>,
    pub fn_alpha: Vec<u64>,
    pub fp_alpha: Vec<u64>,
}

fn hota_of(seq: &Sequence) -> Hota {
    let (ng, np) = (seq.num_gt_ids, seq.num_pred_ids);
    let mut gt_count = vec![0.0; ng];
    let mut pred_count = vec![0.0; np];
    let mut potential = DMatrix::<f64>::zeros(ng, np);
    for fr in &seq.frames {
        let s = &fr.iou;
        let row_sum: Vec<f64> = (0..s.nrows()).map(|i| s.row(i).sum()).collect();
        let col_sum: Vec<f64> = (0..s.ncols()).map(|j| s.column(j).sum()).collect();
        for (i, &g) in fr.gt.iter().enumerate() {
            for (j, &p) in fr.pred.iter().enumerate() {
                let denom = row_sum[i] + col_sum[j] - s[(i, j)];
                if denom > f64::EPSILON {
                    potential[(g, p)] += s[(i, j)] / denom;
                }
            }
        }
        fr.gt.iter().for_each(|&g| gt_count[g] += 1.0);
        fr.pred.iter().for_each(|&p| pred_count[p] += 1.0);
    }
    let global = DMatrix::from_fn(ng, np, |g, p| {
        let d = gt_count[g] + pred_count[p] - potential[(g, p)];
        if d > 0.0 {
            potential[(g, p)] / d
        } else {
            0.0
        }
    });

    let alphas = alphas();
    let na = alphas.len();
    let mut tp = vec![0u64; na];
    let mut matches: Vec<HashMap<(usize, usize), f64>> = vec![HashMap::new(); na];
    for fr in &seq.frames {
        if fr.gt.is_empty() || fr.pred.is_empty() {
            continue;
        }
        let score =
            DMatrix::from_fn(fr.gt.len(), fr.pred.len(), |i, j| global[(fr.gt[i], fr.pred[j])] * fr.iou[(i, j)]);
        for (i, j) in max_score_assignment(&score).expect("scores are finite") {
            let sim = fr.iou[(i, j)];
            for (a, &alpha) in alphas.iter().enumerate() {
                if sim >= alpha - f64::EPSILON {
                    tp[a] += 1;
                    *matches[a].entry((fr.gt[i], fr.pred[j])).or_insert(0.0) += 1.0;
                }
            }
        }
    }

    let mut out = Hota {
        hota: 0.0,
        det_a: 0.0,
        ass_a: 0.0,
        alphas: alphas.clone(),
        hota_alpha: Vec::with_capacity(na),
        det_a_alpha: Vec::with_capacity(na),
        ass_a_alpha: Vec::with_capacity(na),
        tp_alpha: tp.clone(),
        fn_alpha: tp.iter().map(|t| seq.num_gt - t).collect(),
        fp_alpha: tp.iter().map(|t| seq.num_pred - t).collect(),
    };
    for a in 0..na {
        let t = tp[a] as f64;
        let det = t / (seq.num_gt as f64 + seq.num_pred as f64 - t).max(1.0);
        // iterate in key order so the float sum is reproducible
        let mut pairs: Vec<(&(usize, usize), &f64)> = matches[a].iter().collect();
        pairs.sort_by_key(|(k, _)| **k);
        let ass_sum: f64 = pairs.into_iter().map(|(&(g, p), &c)| c * c / (gt_count[g] + pred_count[p] - c)).sum();
        let ass = ass_sum / t.max(1.0);
        out.det_a_alpha.push(det);
        out.ass_a_alpha.push(ass);
        out.hota_alpha.push((det * ass).sqrt());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    out.hota = mean(&out.hota_alpha);
    out.det_a = mean(&out.det_a_alpha);
    out.ass_a = mean(&out.ass_a_alpha);
    out
}

/// Higher-order tracking accuracy over the standard 19-point IoU sweep.
pub fn hota(gt: &[TrackRow], pred: &[TrackRow]) -> Result<Hota, MetricsError> {
    Ok(hota_of(&prepare(gt, pred)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hota: f64,
    pub det_a: f64,
    pub ass_a: f64,
    pub idf1: f64,
    pub mota: f64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub idsw: u64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
    pub num_gt: u64,
    pub num_pred: u64,
    pub curves: Hota,
}

pub fn evaluate(gt: &[TrackRow], pred: &[TrackRow]) -> Result<EvalReport, MetricsError> {
    let seq = prepare(gt, pred)?;
    let c = clear_of(&seq, 0.5);
    let id = identity_of(&seq, 0.5);
    let h = hota_of(&seq);
    Ok(EvalReport {
        hota: h.hota,
        det_a: h.det_a,
        ass_a: h.ass_a,
        idf1: id.idf1,
        mota: c.mota,
        fp: c.fp,
        fn_: c.fn_,
        idsw: c.idsw,
        idtp: id.idtp,
        idfp: id.idfp,
        idfn: id.idfn,
        num_gt: seq.num_gt,
        num_pred: seq.num_pred,
        curves: h,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7} {:>6}\n",
            "HOTA", "DetA", "AssA", "IDF1", "MOTA", "FP", "FN", "IDSW"
        ));
        s.push_str(&format!(
            "{:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>7} {:>7} {:>6}\n",
            100.0 * self.hota,
            100.0 * self.det_a,
            100.0 * self.ass_a,
            100.0 * self.idf1,
            100.0 * self.mota,
            self.fp,
            self.fn_,
            self.idsw
        ));
        s
    }
}
