//! Online detection: per-frame forest averaging, the localization gate and
//! segment refinement.
//!
//! A change of the running label is accepted only when the frame's argmax
//! class differs from it and the forest believes the frame sits near a
//! segment boundary (`mean_loc < beta` or `mean_loc >= 1 - beta`). When a
//! segment closes it is relabeled with the argmax of the class distributions
//! aggregated over its frames.

use thiserror::Error;

use crate::features::FeatureWindow;
use crate::forest::{Forest, ForestError};
use crate::stream::{GroundTruth, SkeletonStream};
use crate::{ClassId, BACKGROUND};

/// Step of the calibration grid over `[0, MAX_BETA]`.
pub const BETA_STEP: f64 = 0.01;
pub const MAX_BETA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("calibration needs at least one labeled frame")]
    NoLabeledData,
    #[error("stream {index} has {frames} frames but {labels} ground-truth labels")]
    LengthMismatch { index: usize, frames: usize, labels: usize },
    #[error("beta {0} outside [0, 0.5]")]
    InvalidBeta(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub class_dist: Vec<f64>,
    pub mean_loc: f64,
    pub argmax_class: ClassId,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(dist: &[f64]) -> ClassId {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as ClassId
}

/// Averages leaf statistics over all trees, adding the number of split tests
/// performed to `comparisons`.
pub fn predict_frame_counted(forest: &Forest, x: &[f64], comparisons: &mut u64) -> Result<FramePrediction, ForestError> {
    forest.check_dim(x)?;
    let mut dist = vec![0.0; forest.n_classes];
    let mut loc = 0.0;
    for tree in &forest.trees {
        let leaf = tree.traverse_counted(x, comparisons);
        for (d, p) in dist.iter_mut().zip(&leaf.class_dist) {
            *d += p;
        }
        loc += leaf.mean_loc;
    }
    let n = forest.trees.len() as f64;
    dist.iter_mut().for_each(|d| *d /= n);
    Ok(FramePrediction {
        argmax_class: argmax(&dist),
        class_dist: dist,
        mean_loc: loc / n,
    })
}

pub fn predict_frame(forest: &Forest, x: &[f64]) -> Result<FramePrediction, ForestError> {
    predict_frame_counted(forest, x, &mut 0)
}

/// Predictions for every frame of a stream.
pub fn predict_stream(forest: &Forest, stream: &SkeletonStream) -> Result<Vec<FramePrediction>, ForestError> {
    if stream.n_joints() != forest.n_joints {
        return Err(ForestError::DimensionMismatch {
            expected: forest.feature_dim(),
            found: 9 * stream.n_joints(),
        });
    }
    let mut window = FeatureWindow::new(forest.params.deriv_lag).expect("validated lag");
    stream
        .frames()
        .iter()
        .map(|f| predict_frame(forest, window.push(f.clone()).values()))
        .collect()
}

/// Whether a frame with this mean location may start or end a segment.
pub fn gate_open(beta: f64, mean_loc: f64) -> bool {
    beta > 0.0 && (mean_loc < beta || mean_loc >= 1.0 - beta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectedSegment {
    pub start: usize,
    pub end: usize,
    pub class_id: ClassId,
    /// Mean probability of `class_id` over the segment's frames.
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct DetectorState {
    beta: f64,
    current_class: ClassId,
    segment_start: usize,
    next_t: usize,
    aggregate_dist: Vec<f64>,
}

impl DetectorState {
    pub fn new(beta: f64, n_classes: usize) -> Result<Self, DetectorError> {
        if !(0.0..=MAX_BETA).contains(&beta) {
            return Err(DetectorError::InvalidBeta(beta));
        }
        Ok(DetectorState {
            beta,
            current_class: BACKGROUND,
            segment_start: 0,
            next_t: 0,
            aggregate_dist: vec![0.0; n_classes],
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn current_class(&self) -> ClassId {
        self.current_class
    }

    pub fn segment_start(&self) -> usize {
        self.segment_start
    }

    fn close(&self, end: usize) -> DetectedSegment {
        let class_id = argmax(&self.aggregate_dist);
        let frames = (end + 1 - self.segment_start) as f64;
        DetectedSegment {
            start: self.segment_start,
            end,
            class_id,
            score: self.aggregate_dist[class_id as usize] / frames,
        }
    }

    /// Consumes frame `t` and returns its causal label, plus the segment that
    /// closed at `t - 1` if the label changed.
    pub fn step(&mut self, t: usize, pred: &FramePrediction) -> (ClassId, Option<DetectedSegment>) {
        assert_eq!(t, self.next_t, "frames must be stepped in order");
        self.next_t += 1;
        let mut closed = None;
        if pred.argmax_class != self.current_class && gate_open(self.beta, pred.mean_loc) {
            if t > self.segment_start {
                closed = Some(self.close(t - 1));
            }
            self.aggregate_dist.fill(0.0);
            self.current_class = pred.argmax_class;
            self.segment_start = t;
        }
        for (a, p) in self.aggregate_dist.iter_mut().zip(&pred.class_dist) {
            *a += p;
        }
        (self.current_class, closed)
    }

    /// Closes the open segment at the last stepped frame.
    pub fn finalize(self) -> DetectedSegment {
        assert!(self.next_t > self.segment_start, "finalize called before any frame");
        self.close(self.next_t - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Causal per-frame labels.
    pub labels: Vec<ClassId>,
    /// Refined segments tiling the stream.
    pub segments: Vec<DetectedSegment>,
}

pub fn run_detector(preds: &[FramePrediction], beta: f64, n_classes: usize) -> Result<Detection, DetectorError> {
    let mut state = DetectorState::new(beta, n_classes)?;
    let mut labels = Vec::with_capacity(preds.len());
    let mut segments = Vec::new();
    for (t, p) in preds.iter().enumerate() {
        let (label, closed) = state.step(t, p);
        labels.push(label);
        segments.extend(closed);
    }
    if !preds.is_empty() {
        segments.push(state.finalize());
    }
    Ok(Detection { labels, segments })
}

/// Number of frames whose causal label differs from the truth.
fn frame_errors(preds: &[FramePrediction], truth: &[ClassId], beta: f64, n_classes: usize) -> usize {
    let det = run_detector(preds, beta, n_classes).expect("beta on the grid");
    det.labels.iter().zip(truth).filter(|(a, b)| a != b).count()
}

pub fn beta_grid() -> impl Iterator<Item = f64> {
    let n = (MAX_BETA / BETA_STEP).round() as usize;
    (0..=n).map(|i| i as f64 * BETA_STEP)
}

/// Grid search for the beta with the lowest frame error rate of causal labels.
/// Returns the chosen beta (smallest on ties) and the error rate per grid point.
pub fn calibrate_from_predictions(
    streams: &[(Vec<FramePrediction>, Vec<ClassId>)],
    n_classes: usize,
) -> Result<(f64, Vec<(f64, f64)>), DetectorError> {
    let total: usize = streams.iter().map(|(p, _)| p.len()).sum();
    if total == 0 {
        return Err(DetectorError::NoLabeledData);
    }
    for (index, (p, y)) in streams.iter().enumerate() {
        if p.len() != y.len() {
            return Err(DetectorError::LengthMismatch {
                index,
                frames: p.len(),
                labels: y.len(),
            });
        }
    }
    let curve: Vec<(f64, f64)> = beta_grid()
        .map(|beta| {
            let errors: usize = streams
                .iter()
                .map(|(p, y)| frame_errors(p, y, beta, n_classes))
                .sum();
            (beta, errors as f64 / total as f64)
        })
        .collect();
    let mut best = curve[0];
    for &point in &curve[1..] {
        if point.1 < best.1 {
            best = point;
        }
    }
    Ok((best.0, curve))
}

pub fn calibrate_beta(forest: &Forest, streams: &[(SkeletonStream, GroundTruth)]) -> Result<f64, DetectorError> {
    let prepared = streams
        .iter()
        .map(|(s, gt)| Ok((predict_stream(forest, s)?, gt.frame_labels())))
        .collect::<Result<Vec<_>, DetectorError>>()?;
    Ok(calibrate_from_predictions(&prepared, forest.n_classes)?.0)
}
