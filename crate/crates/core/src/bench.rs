//! Per-frame latency of the online pipeline and the tree-count sweep.

use std::time::Instant;

use crate::detector::{predict_frame_counted, DetectorState};
use crate::features::FeatureWindow;
use crate::forest::{Forest, ForestError};
use crate::pipeline::{frame_accuracy, LabeledStream, PipelineError};
use crate::stream::SkeletonStream;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub n_measurements: usize,
    /// Most split tests executed for a single frame.
    pub max_comparisons: u64,
    pub mean_comparisons: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Times feature extraction, forest prediction and the detector step for
/// each frame, replaying the stream until at least `min_measurements`
/// frames have been measured.
pub fn benchmark_latency(forest: &Forest, stream: &SkeletonStream, min_measurements: usize) -> Result<LatencyStats, ForestError> {
    if stream.n_joints() != forest.n_joints {
        return Err(ForestError::DimensionMismatch {
            expected: forest.feature_dim(),
            found: 9 * stream.n_joints(),
        });
    }
    let beta = forest.beta.unwrap_or(0.5);
    let target = min_measurements.max(1);
    let mut times = Vec::with_capacity(target + stream.len());
    let mut max_comparisons = 0;
    let mut total_comparisons = 0u64;
    while times.len() < target {
        let mut window = FeatureWindow::new(forest.params.deriv_lag).expect("validated lag");
        let mut state = DetectorState::new(beta, forest.n_classes).expect("beta in range");
        for (t, frame) in stream.frames().iter().enumerate() {
            let frame = frame.clone();
            let mut comparisons = 0;
            let start = Instant::now();
            let x = window.push(frame);
            let pred = predict_frame_counted(forest, x.values(), &mut comparisons)?;
            let out = state.step(t, &pred);
            let elapsed = start.elapsed();
            std::hint::black_box(out);
            times.push(elapsed.as_secs_f64() * 1e3);
            max_comparisons = max_comparisons.max(comparisons);
            total_comparisons += comparisons;
        }
    }
    let n = times.len();
    let mean_ms = times.iter().sum::<f64>() / n as f64;
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mean_ms,
        median_ms: percentile(&times, 0.5),
        p99_ms: percentile(&times, 0.99),
        n_measurements: n,
        max_comparisons,
        mean_comparisons: total_comparisons as f64 / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub n_trees: usize,
    /// Per-frame argmax accuracy on the labeled streams.
    pub accuracy: f64,
    pub latency: LatencyStats,
}

/// Evaluates the first `n` trees of `forest` for each `n` in `counts`.
pub fn tree_sweep(
    forest: &Forest,
    streams: &[LabeledStream],
    counts: &[usize],
    min_measurements: usize,
) -> Result<Vec<SweepPoint>, PipelineError> {
    let first = streams.first().ok_or_else(|| PipelineError::Unlabeled("no streams given".into()))?;
    counts
        .iter()
        .map(|&n| {
            let sub = forest.truncated(n);
            Ok(SweepPoint {
                n_trees: sub.trees.len(),
                accuracy: frame_accuracy(&sub, streams)?,
                latency: benchmark_latency(&sub, &first.stream, min_measurements)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::ForestParams;
    use crate::pipeline::{synthetic_streams, train_on};
    use crate::synth::SynthConfig;

    #[test]
    fn percentiles_pick_ranks() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&[3.0], 0.99), 3.0);
    }

    #[test]
    fn latency_and_sweep_shapes() {
        let cfg = SynthConfig {
            n_classes: 2,
            n_joints: 3,
            segments_per_stream: 4,
            frames_per_segment_range: [10, 20],
            context_dim: 4,
            ..SynthConfig::default()
        };
        let data = synthetic_streams(&cfg, 2).unwrap();
        let forest = train_on(
            &data[..1],
            &ForestParams {
                n_trees: 4,
                ..ForestParams::default()
            },
        )
        .unwrap();
        let stats = benchmark_latency(&forest, &data[1].stream, 1000).unwrap();
        assert!(stats.n_measurements >= 1000);
        assert!(stats.median_ms <= stats.p99_ms);
        assert!(stats.max_comparisons as usize <= 4 * forest.max_depth());
        let sweep = tree_sweep(&forest, &data[1..], &[1, 2, 4, 10], 100).unwrap();
        assert_eq!(sweep.iter().map(|p| p.n_trees).collect::<Vec<_>>(), vec![1, 2, 4, 4]);
    }
}
