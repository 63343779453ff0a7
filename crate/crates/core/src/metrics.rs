//! Frame-level F-scores, anchor-matched event F1 and start/end localization.
//!
//! Ratios with an empty denominator on both sides (nothing to find and nothing
//! found) count as perfect.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::detector::DetectedSegment;
use crate::stream::Segment;
use crate::{ClassId, BACKGROUND};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} frames but ground truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("frame rate must be positive, got {0}")]
    InvalidFps(f64),
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScores {
    /// F1 of every class that occurs in the prediction or the truth.
    pub per_class_f1: BTreeMap<ClassId, f64>,
    /// Micro-averaged F1 over the pooled frames of the scored classes.
    pub overall_f1: f64,
    /// `confusion[truth][pred]` frame counts.
    pub confusion: Vec<Vec<u64>>,
}

pub fn frame_fscore(pred: &[ClassId], truth: &[ClassId], include_background: bool) -> Result<FrameScores, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let n = pred.iter().chain(truth).map(|&c| c as usize + 1).max().unwrap_or(1);
    let mut confusion = vec![vec![0u64; n]; n];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t as usize][p as usize] += 1;
    }
    let mut per_class_f1 = BTreeMap::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 0..n {
        let tp = confusion[c][c];
        let truth_count: u64 = confusion[c].iter().sum();
        let pred_count: u64 = confusion.iter().map(|row| row[c]).sum();
        if truth_count + pred_count == 0 {
            continue;
        }
        let (fp, fn_) = (pred_count - tp, truth_count - tp);
        per_class_f1.insert(c as ClassId, f1(tp, fp, fn_));
        if include_background || c as ClassId != BACKGROUND {
            tp_all += tp;
            fp_all += fp;
            fn_all += fn_;
        }
    }
    Ok(FrameScores {
        per_class_f1,
        overall_f1: f1(tp_all, fp_all, fn_all),
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventScores {
    pub f1_at_delta: f64,
    pub precision: f64,
    pub recall: f64,
    /// `(prediction index, truth index)` into the action-only lists.
    pub matches: Vec<(usize, usize)>,
    pub delta_ms: f64,
    pub n_pred: usize,
    pub n_truth: usize,
}

/// Matches predicted action segments to ground-truth action starts of the same
/// class within `delta_ms`. Predictions are visited in start order and take
/// the nearest free anchor (earliest on ties). Background segments on either
/// side are ignored.
pub fn event_fscore(pred: &[DetectedSegment], truth: &[Segment], delta_ms: f64, fps: f64) -> Result<EventScores, MetricsError> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(MetricsError::InvalidFps(fps));
    }
    let tolerance = delta_ms.max(0.0) * fps / 1000.0;
    let mut preds: Vec<(usize, ClassId)> = pred
        .iter()
        .filter(|s| s.class_id != BACKGROUND)
        .map(|s| (s.start, s.class_id))
        .collect();
    preds.sort_by_key(|p| p.0);
    let anchors: Vec<(usize, ClassId)> = truth
        .iter()
        .filter(|s| s.class_id != BACKGROUND)
        .map(|s| (s.start, s.class_id))
        .collect();
    let mut taken = vec![false; anchors.len()];
    let mut matches = Vec::new();
    for (pi, &(start, class)) in preds.iter().enumerate() {
        let mut best: Option<(usize, usize)> = None;
        for (gi, &(anchor, gclass)) in anchors.iter().enumerate() {
            if taken[gi] || gclass != class {
                continue;
            }
            let d = start.abs_diff(anchor);
            if d as f64 <= tolerance && best.is_none_or(|(bd, bg)| d < bd || (d == bd && anchor < anchors[bg].0)) {
                best = Some((d, gi));
            }
        }
        if let Some((_, gi)) = best {
            taken[gi] = true;
            matches.push((pi, gi));
        }
    }
    let m = matches.len() as u64;
    let ratio = |den: usize| if den == 0 { 1.0 } else { m as f64 / den as f64 };
    Ok(EventScores {
        f1_at_delta: f1(m, preds.len() as u64 - m, anchors.len() as u64 - m),
        precision: ratio(preds.len()),
        recall: ratio(anchors.len()),
        matches,
        delta_ms,
        n_pred: preds.len(),
        n_truth: anchors.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryScores {
    pub sl: f64,
    pub el: f64,
    /// Ground-truth action segments scored.
    pub n_segments: usize,
}

/// Start and end localization. Each ground-truth action segment is paired
/// with the same-class prediction of largest overlap and scores
/// `max(0, 1 - |offset| / length)` at each end; unpaired segments score 0.
pub fn boundary_scores(pred: &[DetectedSegment], truth: &[Segment]) -> BoundaryScores {
    let actions: Vec<&Segment> = truth.iter().filter(|s| s.class_id != BACKGROUND).collect();
    if actions.is_empty() {
        return BoundaryScores {
            sl: 1.0,
            el: 1.0,
            n_segments: 0,
        };
    }
    let (mut sl, mut el) = (0.0, 0.0);
    for gt in &actions {
        let mut best: Option<(&DetectedSegment, usize)> = None;
        for p in pred.iter().filter(|p| p.class_id == gt.class_id) {
            let lo = p.start.max(gt.start);
            let hi = p.end.min(gt.end);
            if lo > hi {
                continue;
            }
            let overlap = hi - lo + 1;
            if best.is_none_or(|(_, o)| overlap > o) {
                best = Some((p, overlap));
            }
        }
        if let Some((p, _)) = best {
            let len = gt.len() as f64;
            sl += (1.0 - p.start.abs_diff(gt.start) as f64 / len).max(0.0);
            el += (1.0 - p.end.abs_diff(gt.end) as f64 / len).max(0.0);
        }
    }
    let n = actions.len() as f64;
    BoundaryScores {
        sl: sl / n,
        el: el / n,
        n_segments: actions.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(start: usize, end: usize, class_id: ClassId) -> DetectedSegment {
        DetectedSegment {
            start,
            end,
            class_id,
            score: 1.0,
        }
    }

    #[test]
    fn frame_examples() {
        let gt = [0, 1, 1, 2, 2, 0];
        let s = frame_fscore(&gt, &gt, false).unwrap();
        assert_eq!(s.overall_f1, 1.0);
        assert!(s.per_class_f1.values().all(|&v| v == 1.0));

        let s = frame_fscore(&[0; 6], &gt, false).unwrap();
        assert_eq!(s.overall_f1, 0.0);

        let truth: Vec<ClassId> = (0..10).map(|t| u32::from(t <= 4)).collect();
        let pred: Vec<ClassId> = (0..10).map(|t| u32::from((2..=6).contains(&t))).collect();
        let s = frame_fscore(&pred, &truth, false).unwrap();
        assert!((s.per_class_f1[&1] - 0.6).abs() < 1e-12);
        assert!((s.overall_f1 - 0.6).abs() < 1e-12);
        assert_eq!(s.confusion[1].iter().sum::<u64>(), 5);

        assert!(frame_fscore(&[0], &[0, 1], false).is_err());
    }

    #[test]
    fn background_can_be_scored() {
        let truth = [0, 0, 0, 1];
        let pred = [0, 0, 1, 1];
        let without = frame_fscore(&pred, &truth, false).unwrap().overall_f1;
        let with = frame_fscore(&pred, &truth, true).unwrap().overall_f1;
        assert!((without - 2.0 / 3.0).abs() < 1e-12);
        assert!((with - 0.75).abs() < 1e-12);
    }

    #[test]
    fn event_examples() {
        let gt = [Segment::new(0, 9, 1), Segment::new(10, 19, 0), Segment::new(20, 29, 2)];
        let perfect = [det(0, 9, 1), det(10, 19, 0), det(20, 29, 2)];
        assert_eq!(event_fscore(&perfect, &gt, 333.0, 30.0).unwrap().f1_at_delta, 1.0);

        let shifted = [det(1, 9, 1), det(21, 29, 2)];
        assert_eq!(event_fscore(&shifted, &gt, 0.0, 30.0).unwrap().f1_at_delta, 0.0);

        let half = [det(0, 9, 1), det(12, 18, 3)];
        let s = event_fscore(&half, &gt, 333.0, 30.0).unwrap();
        assert_eq!((s.precision, s.recall, s.f1_at_delta), (0.5, 0.5, 0.5));

        assert!(event_fscore(&perfect, &gt, 333.0, 0.0).is_err());
    }

    #[test]
    fn tolerance_is_in_frames() {
        let gt = [Segment::new(10, 19, 1)];
        assert_eq!(event_fscore(&[det(20, 25, 1)], &gt, 333.0, 30.0).unwrap().f1_at_delta, 0.0);
        assert_eq!(event_fscore(&[det(19, 25, 1)], &gt, 333.0, 30.0).unwrap().f1_at_delta, 1.0);
    }

    #[test]
    fn boundary_examples() {
        let gt = [Segment::new(0, 9, 1), Segment::new(10, 14, 0)];
        let exact = [det(0, 9, 1), det(10, 14, 0)];
        let s = boundary_scores(&exact, &gt);
        assert_eq!((s.sl, s.el, s.n_segments), (1.0, 1.0, 1));
        let s = boundary_scores(&[], &gt);
        assert_eq!((s.sl, s.el), (0.0, 0.0));
        let late = [det(0, 1, 0), det(2, 9, 1)];
        let s = boundary_scores(&late, &gt);
        assert!((s.sl - 0.8).abs() < 1e-12);
        assert_eq!(s.el, 1.0);
    }

    fn labels() -> impl Strategy<Value = Vec<ClassId>> {
        prop::collection::vec(0u32..4, 1..80)
    }

    fn segments(max_class: u32) -> impl Strategy<Value = Vec<(usize, usize, u32)>> {
        prop::collection::vec((1usize..12, 0u32..max_class), 1..12).prop_map(|runs| {
            let mut start = 0;
            runs.into_iter()
                .map(|(len, c)| {
                    let s = (start, start + len - 1, c);
                    start += len;
                    s
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn self_score_is_perfect(mut x in labels()) {
            x[0] = 1;
            prop_assert_eq!(frame_fscore(&x, &x, false).unwrap().overall_f1, 1.0);
        }

        #[test]
        fn confusion_rows_count_truth(p in labels(), t in labels()) {
            let n = p.len().min(t.len());
            let s = frame_fscore(&p[..n], &t[..n], false).unwrap();
            for (c, row) in s.confusion.iter().enumerate() {
                let count = t[..n].iter().filter(|&&y| y as usize == c).count() as u64;
                prop_assert_eq!(row.iter().sum::<u64>(), count);
            }
            prop_assert!(s.per_class_f1.values().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn event_f1_grows_with_delta(p in segments(3), g in segments(3), d1 in 0.0f64..500.0, d2 in 0.0f64..500.0) {
            let pred: Vec<_> = p.iter().map(|&(s, e, c)| det(s, e, c)).collect();
            let gt: Vec<_> = g.iter().map(|&(s, e, c)| Segment::new(s, e, c)).collect();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let a = event_fscore(&pred, &gt, lo, 30.0).unwrap();
            let b = event_fscore(&pred, &gt, hi, 30.0).unwrap();
            prop_assert!(b.f1_at_delta >= a.f1_at_delta);
            let mut seen = std::collections::HashSet::new();
            prop_assert!(b.matches.iter().all(|m| seen.insert(m.1)));
        }

        #[test]
        fn boundary_scores_ignore_time_shift(p in segments(3), g in segments(3), shift in 0usize..50) {
            let pred: Vec<_> = p.iter().map(|&(s, e, c)| det(s, e, c)).collect();
            let gt: Vec<_> = g.iter().map(|&(s, e, c)| Segment::new(s, e, c)).collect();
            let pred2: Vec<_> = p.iter().map(|&(s, e, c)| det(s + shift, e + shift, c)).collect();
            let gt2: Vec<_> = g.iter().map(|&(s, e, c)| Segment::new(s + shift, e + shift, c)).collect();
            let a = boundary_scores(&pred, &gt);
            let b = boundary_scores(&pred2, &gt2);
            prop_assert!((a.sl - b.sl).abs() < 1e-12 && (a.el - b.el).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.sl) && (0.0..=1.0).contains(&a.el));
        }
    }
}
