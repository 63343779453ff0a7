//! Test-time skeleton features and training-time context vectors.

use std::collections::VecDeque;

use thiserror::Error;

use crate::stream::{GroundTruth, JointFrame, SkeletonStream};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("frame index {t} out of range for stream of length {len}")]
    FrameOutOfRange { t: usize, len: usize },
    #[error("derivative lag must be at least 1")]
    ZeroLag,
    #[error("frame {t} lies outside segment ({start}, {end})")]
    OutsideSegment { t: usize, start: usize, end: usize },
    #[error("frame {0} is not covered by the ground truth")]
    Uncovered(usize),
}

/// `[p, p', p'']` for all joints: positions, then first and second causal
/// differences, each block laid out joint-major as `(x, y, depth)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeature(Vec<f64>);

impl FrameFeature {
    pub fn dim_for(n_joints: usize) -> usize {
        9 * n_joints
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    fn from_frames(now: &JointFrame, back1: &JointFrame, back2: &JointFrame, lag: usize) -> Self {
        let n = now.joints.len();
        let lag = lag as f64;
        let mut v = vec![0.0; 9 * n];
        let (pos, rest) = v.split_at_mut(3 * n);
        let (vel, acc) = rest.split_at_mut(3 * n);
        for j in 0..n {
            for k in 0..3 {
                let i = 3 * j + k;
                let p0 = now.joints[j][k];
                let p1 = back1.joints[j][k];
                let p2 = back2.joints[j][k];
                pos[i] = p0;
                vel[i] = (p0 - p1) / lag;
                acc[i] = (p0 - 2.0 * p1 + p2) / (lag * lag);
            }
        }
        FrameFeature(v)
    }
}

/// Feature of frame `t` using only frames `t - lag` and `t - 2 lag`
/// (clamped to frame 0).
pub fn extract_frame_feature(stream: &SkeletonStream, t: usize, lag: usize) -> Result<FrameFeature, FeatureError> {
    if lag == 0 {
        return Err(FeatureError::ZeroLag);
    }
    if t >= stream.len() {
        return Err(FeatureError::FrameOutOfRange { t, len: stream.len() });
    }
    let back1 = t.saturating_sub(lag);
    let back2 = t.saturating_sub(2 * lag);
    Ok(FrameFeature::from_frames(
        stream.frame(t),
        stream.frame(back1),
        stream.frame(back2),
        lag,
    ))
}

/// Features for every frame of a stream.
pub fn extract_all(stream: &SkeletonStream, lag: usize) -> Result<Vec<FrameFeature>, FeatureError> {
    (0..stream.len()).map(|t| extract_frame_feature(stream, t, lag)).collect()
}

/// Incremental feature extractor for live frame sources. Produces the same
/// values as [`extract_frame_feature`] on the equivalent stream.
#[derive(Debug)]
pub struct FeatureWindow {
    lag: usize,
    first: Option<JointFrame>,
    recent: VecDeque<JointFrame>,
    seen: usize,
}

impl FeatureWindow {
    pub fn new(lag: usize) -> Result<Self, FeatureError> {
        if lag == 0 {
            return Err(FeatureError::ZeroLag);
        }
        Ok(FeatureWindow {
            lag,
            first: None,
            recent: VecDeque::with_capacity(2 * lag + 1),
            seen: 0,
        })
    }

    pub fn push(&mut self, frame: JointFrame) -> FrameFeature {
        if self.first.is_none() {
            self.first = Some(frame.clone());
        }
        if self.recent.len() == 2 * self.lag + 1 {
            self.recent.pop_front();
        }
        self.recent.push_back(frame);
        let t = self.seen;
        self.seen += 1;

        let first = self.first.as_ref().unwrap();
        let newest = self.recent.len() - 1;
        let lookup = |back: usize| -> &JointFrame {
            if back > t {
                first
            } else {
                &self.recent[newest - back]
            }
        };
        FrameFeature::from_frames(&self.recent[newest], lookup(self.lag), lookup(2 * self.lag), self.lag)
    }
}

/// Training-only context `z = (z_S, z_T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector {
    pub spatial: Vec<f64>,
    pub temporal: f64,
}

/// Relative position of `t` inside the inclusive segment `(start, end)`:
/// `(t - start) / (end - start + 1)`, always in `[0, 1)`.
pub fn temporal_context(start: usize, end: usize, t: usize) -> Result<f64, FeatureError> {
    if t < start || t > end {
        return Err(FeatureError::OutsideSegment { t, start, end });
    }
    Ok((t - start) as f64 / (end - start + 1) as f64)
}

pub fn assemble_context(row: &[f64], gt: &GroundTruth, t: usize) -> Result<ContextVector, FeatureError> {
    let seg = gt.segment_at(t).ok_or(FeatureError::Uncovered(t))?;
    Ok(ContextVector {
        spatial: row.to_vec(),
        temporal: temporal_context(seg.start, seg.end, t)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::Segment;

    fn stream_from(f: impl Fn(usize) -> [f64; 3], len: usize, n_joints: usize) -> SkeletonStream {
        let frames = (0..len)
            .map(|t| JointFrame {
                t,
                joints: vec![f(t); n_joints],
            })
            .collect();
        SkeletonStream::new("s", 30.0, frames).unwrap()
    }

    #[test]
    fn constant_stream_has_zero_derivatives() {
        let s = stream_from(|_| [1.0, -2.0, 3.5], 6, 2);
        for t in 0..6 {
            let f = extract_frame_feature(&s, t, 2).unwrap();
            assert_eq!(f.values().len(), 18);
            assert!(f.values()[6..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_stream_velocity_constant() {
        let c = [0.5, -1.0, 2.0];
        let s = stream_from(|t| [t as f64 * c[0], t as f64 * c[1], t as f64 * c[2]], 8, 1);
        for t in 2..8 {
            let f = extract_frame_feature(&s, t, 1).unwrap();
            assert_eq!(&f.values()[3..6], &c);
            assert_eq!(&f.values()[6..9], &[0.0; 3]);
        }
    }

    #[test]
    fn quadratic_stream_second_difference() {
        let s = stream_from(|t| [(t * t) as f64; 3], 10, 1);
        for t in 2..10 {
            let f = extract_frame_feature(&s, t, 1).unwrap();
            assert_eq!(f.values()[3], 2.0 * t as f64 - 1.0);
            assert_eq!(f.values()[6], 2.0);
        }
    }

    #[test]
    fn early_frames_clamp_to_start() {
        let s = stream_from(|t| [t as f64; 3], 5, 1);
        let f = extract_frame_feature(&s, 1, 2).unwrap();
        assert_eq!(f.values()[3], 0.5);
        assert_eq!(f.values()[6], 0.25);
    }

    #[test]
    fn out_of_range_frame() {
        let s = stream_from(|_| [0.0; 3], 3, 1);
        assert_eq!(
            extract_frame_feature(&s, 3, 1),
            Err(FeatureError::FrameOutOfRange { t: 3, len: 3 })
        );
    }

    #[test]
    fn window_matches_batch() {
        let s = stream_from(|t| [(t as f64).sin(), (t * t) as f64, 1.0 / (1.0 + t as f64)], 20, 3);
        for lag in 1..4 {
            let mut w = FeatureWindow::new(lag).unwrap();
            for t in 0..s.len() {
                let online = w.push(s.frame(t).clone());
                assert_eq!(online, extract_frame_feature(&s, t, lag).unwrap(), "lag {lag} t {t}");
            }
        }
    }

    #[test]
    fn temporal_context_examples() {
        assert_eq!(temporal_context(0, 9, 0).unwrap(), 0.0);
        assert_eq!(temporal_context(0, 9, 5).unwrap(), 0.5);
        assert_eq!(temporal_context(10, 10, 10).unwrap(), 0.0);
        assert!(temporal_context(3, 5, 6).is_err());
    }

    #[test]
    fn assemble_examples() {
        let gt = GroundTruth::from_sparse(&[Segment::new(0, 3, 1)], 8).unwrap();
        let z = assemble_context(&[1.0, 2.0], &gt, 2).unwrap();
        assert_eq!(z.spatial, vec![1.0, 2.0]);
        assert_eq!(z.temporal, 0.5);

        let z = assemble_context(&[0.0, 0.0], &gt, 4).unwrap();
        assert_eq!(z.spatial, vec![0.0, 0.0]);
        assert_eq!(z.temporal, 0.0);
    }
}
