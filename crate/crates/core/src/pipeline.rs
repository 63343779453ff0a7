//! End-to-end plumbing: dataset directories, training sets, detection,
//! pooled evaluation and the synthetic ablation.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::detector::{self, DetectedSegment, Detection, DetectorError, FramePrediction};
use crate::features::{assemble_context, extract_all, ContextVector, FeatureError};
use crate::forest::{train_forest, Forest, ForestError, ForestParams, Mode, TrainSample, TrainingSet};
use crate::metrics::{self, BoundaryScores, EventScores, FrameScores, MetricsError};
use crate::stream::{self, ContextMatrix, DataError, GroundTruth, SkeletonStream};
use crate::synth::{generate_dataset, SynthConfig};
use crate::ClassId;

pub const STREAM_EXT: &str = "stream";
pub const CONTEXT_EXT: &str = "ctx";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no .{STREAM_EXT} files in {0}")]
    NoStreams(PathBuf),
    #[error("stream {0} has no ground-truth segments")]
    Unlabeled(String),
    #[error("stream {stream} has {found} joints, expected {expected}")]
    JointMismatch { stream: String, expected: usize, found: usize },
    #[error("cannot read directory {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A stream with its annotation and, when available, spatial contexts.
#[derive(Clone, Debug)]
pub struct LabeledStream {
    pub stream: SkeletonStream,
    pub truth: GroundTruth,
    pub contexts: Option<ContextMatrix>,
}

/// Sorted `*.stream` files of a directory.
pub fn stream_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let entries = std::fs::read_dir(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == STREAM_EXT))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PipelineError::NoStreams(dir.to_path_buf()));
    }
    Ok(files)
}

/// Loads every annotated stream of `streams`, with the same-named `.ctx`
/// files from `contexts` when a context directory is given.
pub fn load_labeled_dir(streams: &Path, contexts: Option<&Path>) -> Result<Vec<LabeledStream>, PipelineError> {
    stream_files(streams)?
        .into_iter()
        .map(|path| {
            let (stream, truth) = stream::load_skeleton_stream(&path)?;
            let truth = truth.ok_or_else(|| PipelineError::Unlabeled(path.display().to_string()))?;
            let contexts = match contexts {
                Some(dir) => {
                    let ctx_path = dir.join(format!("{}.{CONTEXT_EXT}", stream.stream_id()));
                    Some(stream::load_context_matrix(&ctx_path, &stream)?)
                }
                None => None,
            };
            Ok(LabeledStream { stream, truth, contexts })
        })
        .collect()
}

/// Writes `<id>.stream` and `<id>.ctx` into `dir`.
pub fn write_labeled(dir: &Path, data: &LabeledStream) -> Result<(), PipelineError> {
    let id = data.stream.stream_id();
    stream::write_skeleton_stream(&dir.join(format!("{id}.{STREAM_EXT}")), &data.stream, Some(&data.truth))?;
    if let Some(ctx) = &data.contexts {
        stream::write_context_matrix(&dir.join(format!("{id}.{CONTEXT_EXT}")), ctx)?;
    }
    Ok(())
}

pub fn synthetic_streams(config: &SynthConfig, count: usize) -> Result<Vec<LabeledStream>, PipelineError> {
    Ok(generate_dataset(config, count)?
        .into_iter()
        .map(|d| LabeledStream {
            stream: d.stream,
            truth: d.truth,
            contexts: Some(d.contexts),
        })
        .collect())
}

/// One training sample per frame. Spatial contexts are left empty for
/// streams without a context matrix.
pub fn build_training_set(streams: &[LabeledStream], deriv_lag: usize, n_classes: Option<usize>) -> Result<TrainingSet, PipelineError> {
    let n_joints = streams.first().map_or(0, |s| s.stream.n_joints());
    let mut samples = Vec::new();
    for ls in streams {
        if ls.stream.n_joints() != n_joints {
            return Err(PipelineError::JointMismatch {
                stream: ls.stream.stream_id().to_string(),
                expected: n_joints,
                found: ls.stream.n_joints(),
            });
        }
        if let Some(ctx) = &ls.contexts {
            ctx.check_aligned(&ls.stream)?;
        }
        let features = extract_all(&ls.stream, deriv_lag)?;
        for (t, x) in features.into_iter().enumerate() {
            let context = match &ls.contexts {
                Some(ctx) => assemble_context(ctx.row(t), &ls.truth, t)?,
                None => ContextVector {
                    spatial: Vec::new(),
                    ..assemble_context(&[], &ls.truth, t)?
                },
            };
            samples.push(TrainSample {
                feature: x.into_values(),
                context,
                label: ls.truth.segment_at(t).expect("truth tiles the stream").class_id,
                weight: 1.0,
            });
        }
    }
    Ok(TrainingSet::new(samples, n_classes)?)
}

pub fn train_on(streams: &[LabeledStream], params: &ForestParams) -> Result<Forest, PipelineError> {
    let n_classes = streams.iter().map(|s| s.truth.max_class() as usize + 1).max();
    let set = build_training_set(streams, params.deriv_lag, n_classes)?;
    Ok(train_forest(&set, params)?)
}

/// Frame predictions of each stream paired with its frame labels.
pub fn predict_labeled(forest: &Forest, streams: &[LabeledStream]) -> Result<Vec<(Vec<FramePrediction>, Vec<ClassId>)>, PipelineError> {
    streams
        .iter()
        .map(|ls| Ok((detector::predict_stream(forest, &ls.stream)?, ls.truth.frame_labels())))
        .collect()
}

/// Calibrates beta on `streams` and stores it in the forest.
pub fn calibrate(forest: &mut Forest, streams: &[LabeledStream]) -> Result<f64, PipelineError> {
    let prepared = predict_labeled(forest, streams)?;
    let (beta, _) = detector::calibrate_from_predictions(&prepared, forest.n_classes)?;
    forest.beta = Some(beta);
    Ok(beta)
}

/// Beta stored in the model, or the widest gate when uncalibrated.
pub fn effective_beta(forest: &Forest) -> f64 {
    forest.beta.unwrap_or(detector::MAX_BETA)
}

pub fn detect(forest: &Forest, stream: &SkeletonStream, beta: f64) -> Result<Detection, PipelineError> {
    let preds = detector::predict_stream(forest, stream)?;
    Ok(detector::run_detector(&preds, beta, forest.n_classes)?)
}

/// Scores pooled over all evaluated streams.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub frame: FrameScores,
    pub event_f1: f64,
    pub event_precision: f64,
    pub event_recall: f64,
    pub boundary: BoundaryScores,
    pub delta_ms: f64,
    pub n_streams: usize,
    pub n_frames: usize,
}

impl EvalReport {
    /// `key=value` lines for scripts.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("streams".to_string(), self.n_streams.to_string()),
            ("frames".to_string(), self.n_frames.to_string()),
            ("frame_f1".to_string(), format!("{:.6}", self.frame.overall_f1)),
        ];
        for (c, f) in &self.frame.per_class_f1 {
            kv.push((format!("frame_f1_class_{c}"), format!("{f:.6}")));
        }
        kv.extend([
            ("delta_ms".to_string(), format!("{}", self.delta_ms)),
            ("event_f1".to_string(), format!("{:.6}", self.event_f1)),
            ("event_precision".to_string(), format!("{:.6}", self.event_precision)),
            ("event_recall".to_string(), format!("{:.6}", self.event_recall)),
            ("sl".to_string(), format!("{:.6}", self.boundary.sl)),
            ("el".to_string(), format!("{:.6}", self.boundary.el)),
        ]);
        kv
    }
}

/// Evaluates detections stream by stream: causal labels for frame scores,
/// refined segments for event and boundary scores.
pub fn evaluate_detections(
    results: &[(Detection, &GroundTruth, f64)],
    delta_ms: f64,
    include_background: bool,
) -> Result<EvalReport, PipelineError> {
    let mut pred_labels = Vec::new();
    let mut truth_labels = Vec::new();
    let (mut matched, mut n_pred, mut n_truth) = (0usize, 0usize, 0usize);
    let (mut sl, mut el, mut n_seg) = (0.0, 0.0, 0usize);
    for (det, truth, fps) in results {
        pred_labels.extend_from_slice(&det.labels);
        truth_labels.extend(truth.frame_labels());
        let ev: EventScores = metrics::event_fscore(&det.segments, truth.segments(), delta_ms, *fps)?;
        matched += ev.matches.len();
        n_pred += ev.n_pred;
        n_truth += ev.n_truth;
        let b = metrics::boundary_scores(&det.segments, truth.segments());
        sl += b.sl * b.n_segments as f64;
        el += b.el * b.n_segments as f64;
        n_seg += b.n_segments;
    }
    let frame = metrics::frame_fscore(&pred_labels, &truth_labels, include_background)?;
    let ratio = |den: usize| if den == 0 { 1.0 } else { matched as f64 / den as f64 };
    let event_f1 = if n_pred + n_truth == 0 {
        1.0
    } else {
        2.0 * matched as f64 / (n_pred + n_truth) as f64
    };
    let boundary = if n_seg == 0 {
        BoundaryScores {
            sl: 1.0,
            el: 1.0,
            n_segments: 0,
        }
    } else {
        BoundaryScores {
            sl: sl / n_seg as f64,
            el: el / n_seg as f64,
            n_segments: n_seg,
        }
    };
    Ok(EvalReport {
        frame,
        event_f1,
        event_precision: ratio(n_pred),
        event_recall: ratio(n_truth),
        boundary,
        delta_ms,
        n_streams: results.len(),
        n_frames: truth_labels.len(),
    })
}

pub fn evaluate(
    forest: &Forest,
    streams: &[LabeledStream],
    beta: f64,
    delta_ms: f64,
    include_background: bool,
) -> Result<EvalReport, PipelineError> {
    let results = streams
        .iter()
        .map(|ls| Ok((detect(forest, &ls.stream, beta)?, &ls.truth, ls.stream.frame_rate())))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    evaluate_detections(&results, delta_ms, include_background)
}

/// Fraction of frames whose per-frame argmax equals the truth.
pub fn frame_accuracy(forest: &Forest, streams: &[LabeledStream]) -> Result<f64, PipelineError> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (preds, truth) in predict_labeled(forest, streams)? {
        hits += preds.iter().zip(&truth).filter(|(p, y)| p.argmax_class == **y).count();
        total += truth.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Synthetic experiment comparing the three objective mixes.
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub synth: SynthConfig,
    pub n_train: usize,
    /// Held-out streams used only to choose beta.
    pub n_calibration: usize,
    pub n_test: usize,
    pub params: ForestParams,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            synth: SynthConfig::default(),
            n_train: 6,
            n_calibration: 2,
            n_test: 4,
            params: ForestParams::default(),
        }
    }
}

/// Data for one ablation seed: train, calibration and test streams drawn
/// with disjoint generator seeds from one shared set of templates.
pub fn ablation_data(cfg: &AblationConfig, seed: u64) -> Result<[Vec<LabeledStream>; 3], PipelineError> {
    let base = SynthConfig {
        template_seed: seed,
        seed: seed.wrapping_mul(1_000),
        ..cfg.synth.clone()
    };
    let split = |offset: u64, count: usize| {
        let c = SynthConfig {
            seed: base.seed + offset,
            ..base.clone()
        };
        synthetic_streams(&c, count)
    };
    let n_cal = cfg.n_train as u64;
    let n_test = n_cal + cfg.n_calibration as u64;
    Ok([
        split(0, cfg.n_train)?,
        split(n_cal, cfg.n_calibration)?,
        split(n_test, cfg.n_test)?,
    ])
}

#[derive(Clone, Debug)]
pub struct ModeResult {
    pub mode: Mode,
    pub beta: f64,
    pub report: EvalReport,
}

/// Trains, calibrates and evaluates every mode on one seed's data.
pub fn run_ablation_seed(cfg: &AblationConfig, seed: u64, modes: &[Mode]) -> Result<Vec<ModeResult>, PipelineError> {
    let [train, calib, test] = ablation_data(cfg, seed)?;
    modes
        .iter()
        .map(|&mode| {
            let params = ForestParams {
                objective_weights: mode.weights(),
                seed,
                ..cfg.params.clone()
            };
            let mut forest = train_on(&train, &params)?;
            let beta = calibrate(&mut forest, &calib)?;
            let report = evaluate(&forest, &test, beta, 333.0, false)?;
            Ok(ModeResult { mode, beta, report })
        })
        .collect()
}

/// Segments of a detection that carry an action class.
pub fn action_segments(det: &Detection) -> impl Iterator<Item = &DetectedSegment> {
    det.segments.iter().filter(|s| s.class_id != crate::BACKGROUND)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            n_classes: 3,
            n_joints: 4,
            segments_per_stream: 6,
            frames_per_segment_range: [15, 25],
            context_dim: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn training_set_covers_every_frame() {
        let data = synthetic_streams(&small_synth(), 2).unwrap();
        let set = build_training_set(&data, 1, None).unwrap();
        let frames: usize = data.iter().map(|d| d.stream.len()).sum();
        assert_eq!(set.len(), frames);
        assert_eq!(set.feature_dim(), 36);
        assert_eq!(set.spatial_dim(), 6);
        assert_eq!(set.label(0), data[0].truth.frame_labels()[0]);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic_streams(&small_synth(), 2).unwrap();
        for d in &data {
            write_labeled(dir.path(), d).unwrap();
        }
        let back = load_labeled_dir(dir.path(), Some(dir.path())).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].truth, data[0].truth);
        assert_eq!(back[0].contexts.as_ref().unwrap().dim(), 6);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_labeled_dir(empty.path(), None), Err(PipelineError::NoStreams(_))));
    }

    #[test]
    fn trained_forest_beats_chance_and_evaluates() {
        let data = synthetic_streams(&small_synth(), 4).unwrap();
        let params = ForestParams {
            n_trees: 5,
            ..ForestParams::default()
        };
        let mut forest = train_on(&data[..3], &params).unwrap();
        let beta = calibrate(&mut forest, &data[3..]).unwrap();
        assert_eq!(forest.beta, Some(beta));
        let acc = frame_accuracy(&forest, &data[3..]).unwrap();
        assert!(acc > 0.5, "accuracy {acc}");
        let report = evaluate(&forest, &data[3..], beta, 333.0, false).unwrap();
        assert_eq!(report.n_frames, data[3].stream.len());
        assert!((0.0..=1.0).contains(&report.frame.overall_f1));
        assert!(report.key_values().iter().any(|(k, _)| k == "event_f1"));
    }
}
