//! Skeleton streams, ground-truth segmentations and per-frame context matrices,
//! plus their text file formats.
//!
//! Stream files:
//!
//! ```text
//! oadf v1 n_joints=<n> fps=<f>
//! <t> <x1> <y1> <d1> ... <xn> <yn> <dn>
//! ...
//! #segments
//! <start> <end> <class_id>
//! ```
//!
//! Context files:
//!
//! ```text
//! ctx v1 dim=<d> rows=<T>
//! <v1> ... <vd>
//! ...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::{ClassId, BACKGROUND};

const STREAM_MAGIC: &str = "oadf";
const CONTEXT_MAGIC: &str = "ctx";
const FORMAT_VERSION: &str = "v1";
const SEGMENTS_MARKER: &str = "#segments";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("context rows do not align with stream: expected {expected} rows, found {found}")]
    Alignment { expected: usize, found: usize },
    #[error("invalid data: {0}")]
    Invalid(String),
}

impl DataError {
    fn format(line: usize, msg: impl Into<String>) -> Self {
        DataError::Format {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One frame of `n` joints, each `(x, y, depth)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFrame {
    pub t: usize,
    pub joints: Vec<[f64; 3]>,
}

/// Time-ordered skeleton frames with consecutive indices starting at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonStream {
    stream_id: String,
    frame_rate: f64,
    n_joints: usize,
    frames: Vec<JointFrame>,
}

impl SkeletonStream {
    pub fn new(stream_id: impl Into<String>, frame_rate: f64, frames: Vec<JointFrame>) -> Result<Self> {
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(DataError::Invalid(format!("frame rate must be positive, got {frame_rate}")));
        }
        let first = frames
            .first()
            .ok_or_else(|| DataError::Invalid("stream has no frames".into()))?;
        let n_joints = first.joints.len();
        if n_joints == 0 {
            return Err(DataError::Invalid("frames must have at least one joint".into()));
        }
        for (i, frame) in frames.iter().enumerate() {
            if frame.t != i {
                return Err(DataError::Invalid(format!("frame {i} carries index {}", frame.t)));
            }
            if frame.joints.len() != n_joints {
                return Err(DataError::Invalid(format!("inconsistent joint count at frame {i}")));
            }
            if frame.joints.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("non-finite coordinate at frame {i}")));
            }
        }
        Ok(SkeletonStream {
            stream_id: stream_id.into(),
            frame_rate,
            n_joints,
            frames,
        })
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[JointFrame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &JointFrame {
        &self.frames[t]
    }
}

/// Frames `start..=end` (inclusive) labelled `class_id`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class_id: ClassId,
}

impl Segment {
    pub fn new(start: usize, end: usize, class_id: ClassId) -> Self {
        Segment { start, end, class_id }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Sorted, disjoint segments tiling `[0, len)` exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    segments: Vec<Segment>,
}

impl GroundTruth {
    /// Builds a tiling from sorted, disjoint segments. Uncovered frames become
    /// background segments.
    pub fn from_sparse(segments: &[Segment], len: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(segments.len() * 2 + 1);
        let mut next = 0usize;
        for seg in segments {
            if seg.start > seg.end {
                return Err(DataError::Invalid(format!(
                    "segment ({}, {}) has start after end",
                    seg.start, seg.end
                )));
            }
            if seg.start < next {
                return Err(DataError::Invalid(format!(
                    "overlapping segments at frame {}",
                    seg.start
                )));
            }
            if seg.end >= len {
                return Err(DataError::Invalid(format!(
                    "segment ({}, {}) exceeds stream length {len}",
                    seg.start, seg.end
                )));
            }
            if seg.start > next {
                out.push(Segment::new(next, seg.start - 1, BACKGROUND));
            }
            out.push(*seg);
            next = seg.end + 1;
        }
        if next < len {
            out.push(Segment::new(next, len - 1, BACKGROUND));
        }
        Ok(GroundTruth { segments: out })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total number of frames covered.
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment_at(&self, t: usize) -> Option<&Segment> {
        let idx = self.segments.partition_point(|s| s.end < t);
        self.segments.get(idx).filter(|s| s.contains(t))
    }

    /// Per-frame class labels.
    pub fn frame_labels(&self) -> Vec<ClassId> {
        let mut labels = Vec::with_capacity(self.len());
        for seg in &self.segments {
            labels.extend(std::iter::repeat_n(seg.class_id, seg.len()));
        }
        labels
    }

    /// Largest class id present.
    pub fn max_class(&self) -> ClassId {
        self.segments.iter().map(|s| s.class_id).max().unwrap_or(BACKGROUND)
    }
}

/// Per-frame spatial context rows of a fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl ContextMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(DataError::Invalid("context dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(DataError::Invalid("context data is not a whole number of rows".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite context entry".into()));
        }
        Ok(ContextMatrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn check_aligned(&self, stream: &SkeletonStream) -> Result<()> {
        if self.rows() != stream.len() {
            return Err(DataError::Alignment {
                expected: stream.len(),
                found: self.rows(),
            });
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn key_value<'a>(token: &'a str, key: &str, line: usize) -> Result<&'a str> {
    token
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| DataError::format(line, format!("malformed header: expected {key}=<value>")))
}

/// Header of a stream file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamHeader {
    pub n_joints: usize,
    pub fps: f64,
}

/// Parses `oadf v1 n_joints=<n> fps=<f>`.
pub fn parse_stream_header(text: &str, line: usize) -> Result<StreamHeader> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != 4 || tokens[0] != STREAM_MAGIC || tokens[1] != FORMAT_VERSION {
        return Err(DataError::format(
            line,
            "malformed header: expected `oadf v1 n_joints=<n> fps=<f>`",
        ));
    }
    let n_joints: usize = key_value(tokens[2], "n_joints", line)?
        .parse()
        .map_err(|_| DataError::format(line, "malformed header: bad n_joints"))?;
    let fps: f64 = key_value(tokens[3], "fps", line)?
        .parse()
        .map_err(|_| DataError::format(line, "malformed header: bad fps"))?;
    if n_joints == 0 {
        return Err(DataError::format(line, "malformed header: n_joints must be at least 1"));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(DataError::format(line, "malformed header: fps must be positive"));
    }
    Ok(StreamHeader { n_joints, fps })
}

/// Parses one `t x1 y1 d1 ...` frame line.
pub fn parse_frame_line(text: &str, n_joints: usize, line: usize) -> Result<JointFrame> {
    let mut tokens = text.split_whitespace();
    let t: usize = tokens
        .next()
        .ok_or_else(|| DataError::format(line, "empty frame line"))?
        .parse()
        .map_err(|_| DataError::format(line, "frame index is not a non-negative integer"))?;
    let values = tokens
        .map(|tok| {
            let v: f64 = tok
                .parse()
                .map_err(|_| DataError::format(line, format!("bad coordinate `{tok}`")))?;
            if !v.is_finite() {
                return Err(DataError::format(line, "non-finite coordinate"));
            }
            Ok(v)
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() % 3 != 0 || values.len() / 3 != n_joints {
        return Err(DataError::format(
            line,
            format!(
                "inconsistent joint count: expected {n_joints} joints, found {} values",
                values.len()
            ),
        ));
    }
    let joints = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(JointFrame { t, joints })
}

/// Parses a stream file's contents. Ground truth is returned iff a
/// `#segments` block is present.
pub fn parse_skeleton_stream(text: &str, stream_id: &str) -> Result<(SkeletonStream, Option<GroundTruth>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, htext) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| DataError::format(1, "malformed header: empty file"))?;
    let header = parse_stream_header(htext, hline)?;

    let mut frames = Vec::new();
    let mut sparse = Vec::new();
    let mut in_segments = false;
    for (line, raw) in lines {
        let text = raw.trim();
        if text.is_empty() {
            continue;
        }
        if text == SEGMENTS_MARKER {
            if in_segments {
                return Err(DataError::format(line, "duplicate #segments marker"));
            }
            in_segments = true;
            continue;
        }
        if !in_segments {
            let frame = parse_frame_line(text, header.n_joints, line)?;
            if frame.t != frames.len() {
                return Err(DataError::format(
                    line,
                    format!("frame index {} out of order, expected {}", frame.t, frames.len()),
                ));
            }
            frames.push(frame);
        } else {
            let nums: Vec<&str> = text.split_whitespace().collect();
            if nums.len() != 3 {
                return Err(DataError::format(line, "segment line must be `start end class_id`"));
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| DataError::format(line, format!("bad segment field `{s}`")))
            };
            let (start, end) = (parse(nums[0])?, parse(nums[1])?);
            let class_id: ClassId = nums[2]
                .parse()
                .map_err(|_| DataError::format(line, format!("bad class id `{}`", nums[2])))?;
            if start > end {
                return Err(DataError::format(line, "segment start after end"));
            }
            if let Some(prev) = sparse.last().map(|s: &(Segment, usize)| s.0) {
                if start <= prev.end {
                    return Err(DataError::format(line, "overlapping segments"));
                }
            }
            if end >= frames.len() {
                return Err(DataError::format(
                    line,
                    format!("segment end {end} beyond stream length {}", frames.len()),
                ));
            }
            sparse.push((Segment::new(start, end, class_id), line));
        }
    }
    if frames.is_empty() {
        return Err(DataError::format(hline, "stream has no frames"));
    }
    let len = frames.len();
    let stream = SkeletonStream::new(stream_id, header.fps, frames)?;
    let truth = if in_segments {
        let segs: Vec<Segment> = sparse.iter().map(|(s, _)| *s).collect();
        Some(GroundTruth::from_sparse(&segs, len)?)
    } else {
        None
    };
    Ok((stream, truth))
}

fn stream_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_skeleton_stream(path: &Path) -> Result<(SkeletonStream, Option<GroundTruth>)> {
    let text = read_text(path)?;
    parse_skeleton_stream(&text, &stream_id_of(path))
}

pub fn format_stream_header(n_joints: usize, fps: f64) -> String {
    format!("{STREAM_MAGIC} {FORMAT_VERSION} n_joints={n_joints} fps={fps}")
}

pub fn format_frame_line(frame: &JointFrame) -> String {
    let mut out = frame.t.to_string();
    for v in frame.joints.iter().flatten() {
        write!(out, " {v}").unwrap();
    }
    out
}

pub fn render_skeleton_stream(stream: &SkeletonStream, truth: Option<&GroundTruth>) -> String {
    let mut out = format_stream_header(stream.n_joints(), stream.frame_rate());
    out.push('\n');
    for frame in stream.frames() {
        out.push_str(&format_frame_line(frame));
        out.push('\n');
    }
    if let Some(gt) = truth {
        out.push_str(SEGMENTS_MARKER);
        out.push('\n');
        for s in gt.segments() {
            writeln!(out, "{} {} {}", s.start, s.end, s.class_id).unwrap();
        }
    }
    out
}

pub fn write_skeleton_stream(path: &Path, stream: &SkeletonStream, truth: Option<&GroundTruth>) -> Result<()> {
    write_text(path, &render_skeleton_stream(stream, truth))
}

pub fn parse_context_matrix(text: &str) -> Result<ContextMatrix> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, htext) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| DataError::format(1, "malformed header: empty file"))?;
    let tokens: Vec<&str> = htext.split_whitespace().collect();
    if tokens.len() != 4 || tokens[0] != CONTEXT_MAGIC || tokens[1] != FORMAT_VERSION {
        return Err(DataError::format(hline, "malformed header: expected `ctx v1 dim=<d> rows=<T>`"));
    }
    let dim: usize = key_value(tokens[2], "dim", hline)?
        .parse()
        .map_err(|_| DataError::format(hline, "malformed header: bad dim"))?;
    let rows: usize = key_value(tokens[3], "rows", hline)?
        .parse()
        .map_err(|_| DataError::format(hline, "malformed header: bad rows"))?;
    if dim == 0 {
        return Err(DataError::format(hline, "malformed header: dim must be positive"));
    }
    let mut data = Vec::with_capacity(dim * rows);
    let mut seen = 0usize;
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in raw.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| DataError::format(line, format!("bad value `{tok}`")))?;
            if !v.is_finite() {
                return Err(DataError::format(line, "non-finite context entry"));
            }
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(DataError::format(
                line,
                format!("row has {} values, expected {dim}", data.len() - before),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(DataError::Alignment {
            expected: rows,
            found: seen,
        });
    }
    ContextMatrix::new(dim, data)
}

/// Loads a context matrix and checks it has one row per stream frame.
pub fn load_context_matrix(path: &Path, stream: &SkeletonStream) -> Result<ContextMatrix> {
    let ctx = parse_context_matrix(&read_text(path)?)?;
    ctx.check_aligned(stream)?;
    Ok(ctx)
}

pub fn render_context_matrix(ctx: &ContextMatrix) -> String {
    let mut out = format!("{CONTEXT_MAGIC} {FORMAT_VERSION} dim={} rows={}\n", ctx.dim(), ctx.rows());
    for t in 0..ctx.rows() {
        let row = ctx.row(t);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_context_matrix(path: &Path, ctx: &ContextMatrix) -> Result<()> {
    write_text(path, &render_context_matrix(ctx))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "oadf v1 n_joints=2 fps=30\n\
        0 0 0 1 1 1 2\n\
        1 0.5 0 1 1 1 2\n\
        2 1 0 1 1 1 2\n";

    #[test]
    fn minimal_stream_parses() {
        let (s, gt) = parse_skeleton_stream(MINIMAL, "s").unwrap();
        assert_eq!(s.n_joints(), 2);
        assert_eq!(s.len(), 3);
        assert_eq!(s.frame(1).joints[0], [0.5, 0.0, 1.0]);
        assert!(gt.is_none());
    }

    #[test]
    fn inconsistent_joint_count_reports_line() {
        let text = "oadf v1 n_joints=2 fps=30\n0 0 0 1 1 1 2\n1 0 0 1\n";
        match parse_skeleton_stream(text, "s") {
            Err(DataError::Format { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("inconsistent joint count"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header_rejected() {
        for bad in ["oadf v2 n_joints=2 fps=30", "oadf v1 joints=2 fps=30", "oadf v1 n_joints=0 fps=30"] {
            let text = format!("{bad}\n0 0 0 0 0 0 0\n");
            assert!(matches!(
                parse_skeleton_stream(&text, "s"),
                Err(DataError::Format { line: 1, .. })
            ));
        }
    }

    fn ten_frames() -> String {
        let mut text = String::from("oadf v1 n_joints=1 fps=30\n");
        for t in 0..10 {
            text.push_str(&format!("{t} {t} 0 1\n"));
        }
        text
    }

    #[test]
    fn segments_tile_stream() {
        let text = format!("{}#segments\n0 4 1\n5 9 2\n", ten_frames());
        let (_, gt) = parse_skeleton_stream(&text, "s").unwrap();
        let gt = gt.unwrap();
        assert_eq!(gt.segments(), &[Segment::new(0, 4, 1), Segment::new(5, 9, 2)]);
        assert_eq!(gt.len(), 10);
    }

    #[test]
    fn gaps_become_background() {
        let text = format!("{}#segments\n2 4 1\n", ten_frames());
        let (_, gt) = parse_skeleton_stream(&text, "s").unwrap();
        assert_eq!(
            gt.unwrap().segments(),
            &[Segment::new(0, 1, 0), Segment::new(2, 4, 1), Segment::new(5, 9, 0)]
        );
    }

    #[test]
    fn overlapping_segments_rejected_with_line() {
        let text = format!("{}#segments\n0 4 1\n4 9 2\n", ten_frames());
        match parse_skeleton_stream(&text, "s") {
            Err(DataError::Format { line, msg }) => {
                assert_eq!(line, 14);
                assert!(msg.contains("overlapping"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_order_frame_rejected() {
        let text = "oadf v1 n_joints=1 fps=30\n0 0 0 0\n2 0 0 0\n";
        assert!(matches!(
            parse_skeleton_stream(text, "s"),
            Err(DataError::Format { line: 3, .. })
        ));
    }

    #[test]
    fn segment_lookup() {
        let gt = GroundTruth::from_sparse(&[Segment::new(3, 5, 2)], 8).unwrap();
        assert_eq!(gt.segment_at(0).unwrap().class_id, 0);
        assert_eq!(gt.segment_at(4).unwrap().class_id, 2);
        assert_eq!(gt.segment_at(7).unwrap().start, 6);
        assert!(gt.segment_at(8).is_none());
        assert_eq!(gt.frame_labels(), vec![0, 0, 0, 2, 2, 2, 0, 0]);
    }

    #[test]
    fn context_matrix_dimension_from_header() {
        let (s, _) = parse_skeleton_stream("oadf v1 n_joints=1 fps=10\n0 1 2 3\n", "s").unwrap();
        let ctx = parse_context_matrix("ctx v1 dim=4 rows=1\n1 2 3 4\n").unwrap();
        ctx.check_aligned(&s).unwrap();
        assert_eq!(ctx.dim(), 4);
        assert_eq!(ctx.row(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn context_row_mismatch_is_alignment_error() {
        let (s, _) = parse_skeleton_stream(&ten_frames(), "s").unwrap();
        let mut text = String::from("ctx v1 dim=2 rows=9\n");
        for _ in 0..9 {
            text.push_str("0 1\n");
        }
        let ctx = parse_context_matrix(&text).unwrap();
        assert!(matches!(
            ctx.check_aligned(&s),
            Err(DataError::Alignment { expected: 10, found: 9 })
        ));
    }

    #[test]
    fn context_non_finite_rejected() {
        assert!(matches!(
            parse_context_matrix("ctx v1 dim=2 rows=1\n1 NaN\n"),
            Err(DataError::Format { line: 2, .. })
        ));
    }

    #[test]
    fn render_round_trip() {
        let text = format!("{}#segments\n0 4 1\n5 9 2\n", ten_frames());
        let (s, gt) = parse_skeleton_stream(&text, "s").unwrap();
        assert_eq!(render_skeleton_stream(&s, gt.as_ref()), text);
    }
}
