//! MOTChallenge text formats: detections, ground truth and tracker results.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, IoError};
use crate::geometry::BBox;

/// One line of `det.txt`, already converted to corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetRecord {
    pub frame: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

/// A row of a ground-truth or result file: `frame,id,x,y,w,h,conf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub frame: u32,
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl TrackRow {
    pub fn from_bbox(frame: u32, id: u64, bbox: &BBox, confidence: f64) -> Self {
        Self { frame, id, x: bbox.x1(), y: bbox.y1(), w: bbox.width(), h: bbox.height(), confidence }
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_xywh(self.x, self.y, self.w, self.h).expect("track rows hold validated boxes")
    }
}

struct Fields<'a> {
    line: usize,
    parts: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn new(line: usize, text: &'a str, min: usize) -> Result<Self, IoError> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() < min {
            return Err(IoError::Parse {
                line,
                column: parts.len() + 1,
                msg: format!("expected at least {min} comma-separated fields, found {}", parts.len()),
            });
        }
        Ok(Self { line, parts })
    }

    fn num(&self, col: usize) -> Result<f64, IoError> {
        let raw = self.parts[col];
        let v: f64 = raw.parse().map_err(|_| self.err(col, format!("invalid number {raw:?}")))?;
        if !v.is_finite() {
            return Err(self.err(col, format!("non-finite value {raw:?}")));
        }
        Ok(v)
    }

    fn frame(&self) -> Result<u32, IoError> {
        let v = self.num(0)?;
        if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(self.err(0, format!("frame must be a positive integer, found {v}")));
        }
        Ok(v as u32)
    }

    fn bbox(&self) -> Result<BBox, IoError> {
        let (x, y, w, h) = (self.num(2)?, self.num(3)?, self.num(4)?, self.num(5)?);
        if w <= 0.0 {
            return Err(self.err(4, format!("box width must be positive, found {w}")));
        }
        if h <= 0.0 {
            return Err(self.err(5, format!("box height must be positive, found {h}")));
        }
        BBox::from_xywh(x, y, w, h).map_err(|e| self.err(2, e.to_string()))
    }

    fn err(&self, col: usize, msg: String) -> IoError {
        IoError::Parse { line: self.line, column: col + 1, msg }
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

/// Parses `det.txt`. Rows are returned in file order, which fixes each
/// detection's index within its frame.
pub fn parse_detections(text: &str) -> Result<Vec<DetRecord>, IoError> {
    content_lines(text)
        .map(|(line, l)| {
            let f = Fields::new(line, l, 7)?;
            let confidence = f.num(6)?;
            if !(0.0..=1.0).contains(&confidence) {
                return Err(f.err(6, format!("confidence must lie in [0, 1], found {confidence}")));
            }
            Ok(DetRecord { frame: f.frame()?, bbox: f.bbox()?, confidence })
        })
        .collect()
}

/// Parses a ground-truth or result file. A missing confidence column reads
/// as 1.0. Duplicate `(frame, id)` pairs are rejected.
pub fn parse_tracks(text: &str) -> Result<Vec<TrackRow>, IoError> {
    let mut seen = HashSet::new();
    content_lines(text)
        .map(|(line, l)| {
            let f = Fields::new(line, l, 6)?;
            let frame = f.frame()?;
            let id = f.num(1)?;
            if id < 0.0 || id.fract() != 0.0 {
                return Err(f.err(1, format!("track id must be a non-negative integer, found {id}")));
            }
            let id = id as u64;
            f.bbox()?;
            let (x, y, w, h) = (f.num(2)?, f.num(3)?, f.num(4)?, f.num(5)?);
            let confidence = if f.parts.len() > 6 { f.num(6)? } else { 1.0 };
            if !seen.insert((frame, id)) {
                return Err(f.err(1, format!("duplicate row for frame {frame}, id {id}")));
            }
            Ok(TrackRow { frame, id, x, y, w, h, confidence })
        })
        .collect()
}

pub fn read_tracks(path: impl AsRef<Path>) -> Result<Vec<TrackRow>, IoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_tracks(&text).map_err(|e| e.in_file(path))
}

/// Formats rows as MOTChallenge result lines, sorted frame-major then by id.
/// Floats use the shortest representation that parses back to the same value.
pub fn format_tracks(rows: &[TrackRow]) -> String {
    let mut sorted: Vec<&TrackRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.frame, r.id));
    let mut out = String::new();
    for r in sorted {
        writeln!(out, "{},{},{},{},{},{},{},-1,-1,-1", r.frame, r.id, r.x, r.y, r.w, r.h, r.confidence).unwrap();
    }
    out
}

/// Writes tracker output; the file appears only once fully written.
pub fn write_results(rows: &[TrackRow], path: impl AsRef<Path>) -> Result<(), IoError> {
    atomic_write(path.as_ref(), format_tracks(rows).as_bytes())
}

pub fn format_detections(dets: &[DetRecord]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = &d.bbox;
        writeln!(out, "{},-1,{},{},{},{},{},-1,-1,-1", d.frame, b.x1(), b.y1(), b.width(), b.height(), d.confidence)
            .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_line_maps_fields() {
        let d = parse_detections("1,-1,10,20,30,40,0.9,-1,-1,-1\n").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].frame, 1);
        assert_eq!(d[0].bbox, BBox::new(10., 20., 40., 60.).unwrap());
        assert_eq!(d[0].confidence, 0.9);
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse_detections("").unwrap().is_empty());
        assert!(parse_tracks("\n\n").unwrap().is_empty());
    }

    #[test]
    fn rejects_nan_and_negative_sizes() {
        let e = parse_detections("1,-1,10,20,30,40,nan").unwrap_err();
        assert!(matches!(e, IoError::Parse { line: 1, column: 7, .. }), "{e}");
        let e = parse_detections("1,-1,0,0,5,5,0.5\n2,-1,10,20,-3,40,0.9").unwrap_err();
        assert!(matches!(e, IoError::Parse { line: 2, column: 5, .. }), "{e}");
        let e = parse_detections("1,-1,10,20,3,40,1.5").unwrap_err();
        assert!(matches!(e, IoError::Parse { column: 7, .. }));
        let e = parse_detections("1,-1,10,20,3").unwrap_err();
        assert!(matches!(e, IoError::Parse { column: 6, .. }));
        let e = parse_detections("0,-1,10,20,3,4,0.5").unwrap_err();
        assert!(matches!(e, IoError::Parse { column: 1, .. }));
    }

    #[test]
    fn tracks_reject_duplicates() {
        let e = parse_tracks("1,3,0,0,5,5\n1,3,1,1,5,5").unwrap_err();
        assert!(matches!(e, IoError::Parse { line: 2, .. }));
    }

    #[test]
    fn one_row_one_line() {
        let row = TrackRow { frame: 3, id: 7, x: 1.5, y: 2.0, w: 10.0, h: 20.25, confidence: 0.8 };
        let text = format_tracks(&[row]);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.trim_end().split(',').count(), 10);
        assert_eq!(format_tracks(&[]), "");
    }

    #[test]
    fn write_then_reload_gives_same_rows() {
        let rows = vec![
            TrackRow { frame: 2, id: 1, x: 0.1, y: 0.2, w: 3.3, h: 4.4, confidence: 0.91 },
            TrackRow { frame: 1, id: 2, x: 10.0 / 3.0, y: 7.0, w: 1e-3, h: 99.9, confidence: 1.0 },
            TrackRow { frame: 1, id: 1, x: -4.0, y: 5.0, w: 2.0, h: 2.0, confidence: 0.5 },
        ];
        let back = parse_tracks(&format_tracks(&rows)).unwrap();
        let key = |r: &TrackRow| (r.frame, r.id);
        let mut a = rows.clone();
        a.sort_by_key(key);
        assert_eq!(a, back);
    }
}
