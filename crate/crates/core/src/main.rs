use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use oad_forest::bench::{benchmark_latency, tree_sweep};
use oad_forest::detector::{predict_frame, DetectedSegment, DetectorState};
use oad_forest::features::FeatureWindow;
use oad_forest::forest::model::{load_model, save_model, ModelError};
use oad_forest::forest::{CandidateMode, Forest, ForestParams, Mode};
use oad_forest::pipeline::{self, LabeledStream, PipelineError};
use oad_forest::stream::{self, DataError, JointFrame};
use oad_forest::synth::SynthConfig;

/// `println!` that returns write errors, so a closed pipe ends the command cleanly.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(io::stdout(), $($arg)*)?
    };
}

const EXIT_INPUT: u8 = 2;
const EXIT_FORMAT: u8 = 3;

#[derive(Parser)]
#[command(name = "oadf", version, about = "Online action detection with context-trained random forests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic streams, contexts and annotations.
    Synth(SynthArgs),
    /// Train a forest on annotated streams.
    Train(TrainArgs),
    /// Choose the localization gate on annotated streams and store it in the model.
    Calibrate(CalibrateArgs),
    /// Label a stream frame by frame.
    Detect(DetectArgs),
    /// Score detections against annotations.
    Eval(EvalArgs),
    /// Measure per-frame latency.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML generator config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of streams, seeded consecutively from the config seed.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    streams: PathBuf,
    /// Directory with `<id>.ctx` files; defaults to the stream directory.
    #[arg(long)]
    contexts: Option<PathBuf>,
    #[arg(long, default_value = "rf+st")]
    mode: Mode,
    #[arg(long, default_value_t = 50)]
    trees: usize,
    #[arg(long, default_value_t = 100)]
    max_depth: usize,
    #[arg(long, default_value_t = 64)]
    candidates: usize,
    #[arg(long, default_value_t = 1)]
    min_samples: usize,
    #[arg(long, default_value_t = 256)]
    m_max: usize,
    #[arg(long, default_value_t = 1)]
    deriv_lag: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score every midpoint instead of random thresholds.
    #[arg(long)]
    exhaustive: bool,
    /// Squared distances in the group-spread objective.
    #[arg(long)]
    squared_higher: bool,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    streams: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, conflicts_with = "stdin", required_unless_present = "stdin")]
    stream: Option<PathBuf>,
    /// Read the stream from standard input, one frame per line.
    #[arg(long)]
    stdin: bool,
    /// Override the model's gate.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    streams: PathBuf,
    #[arg(long, default_value_t = 333.0)]
    delta_ms: f64,
    #[arg(long)]
    include_background: bool,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Minimum number of timed frames.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Comma-separated tree counts; needs an annotated stream.
    #[arg(long, value_delimiter = ',')]
    sweep_trees: Option<Vec<usize>>,
}

fn synth(args: SynthArgs) -> Result<()> {
    let config: SynthConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SynthConfig::default(),
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for data in pipeline::synthetic_streams(&config, args.count)? {
        pipeline::write_labeled(&args.out, &data)?;
        out!("{} frames={}", data.stream.stream_id(), data.stream.len());
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let params = ForestParams {
        n_trees: args.trees,
        max_depth: args.max_depth,
        min_samples: args.min_samples,
        n_candidates: args.candidates,
        objective_weights: args.mode.weights(),
        m_max: args.m_max,
        deriv_lag: args.deriv_lag,
        seed: args.seed,
        candidate_mode: if args.exhaustive {
            CandidateMode::Exhaustive
        } else {
            CandidateMode::Random
        },
        squared_higher: args.squared_higher,
        bootstrap: true,
    };
    let contexts = if params.objective_weights.uses_spatial() {
        Some(args.contexts.as_deref().unwrap_or(&args.streams))
    } else {
        args.contexts.as_deref()
    };
    let streams = pipeline::load_labeled_dir(&args.streams, contexts)?;
    let forest = pipeline::train_on(&streams, &params)?;
    save_model(&forest, &args.model)?;
    out!(
        "trained {} trees on {} streams, max depth {}",
        forest.trees.len(),
        streams.len(),
        forest.max_depth()
    );
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let mut forest = load_model(&args.model)?;
    let streams = pipeline::load_labeled_dir(&args.streams, None)?;
    let beta = pipeline::calibrate(&mut forest, &streams)?;
    save_model(&forest, &args.model)?;
    out!("beta={beta:.2}");
    Ok(())
}

fn gate(forest: &Forest, beta: Option<f64>) -> Result<f64> {
    let beta = beta.unwrap_or_else(|| pipeline::effective_beta(forest));
    if !(0.0..=0.5).contains(&beta) {
        bail!("beta {beta} outside [0, 0.5]");
    }
    Ok(beta)
}

/// Runs the online detector over `frames`, writing `t label mean_loc` after
/// every frame and the refined segments at the end.
fn detect_frames(
    forest: &Forest,
    beta: f64,
    frames: impl Iterator<Item = Result<JointFrame>>,
    out: &mut impl Write,
) -> Result<()> {
    let mut window = FeatureWindow::new(forest.params.deriv_lag)?;
    let mut state = DetectorState::new(beta, forest.n_classes)?;
    let mut segments: Vec<DetectedSegment> = Vec::new();
    let mut n = 0;
    for (t, frame) in frames.enumerate() {
        let frame = frame?;
        if frame.joints.len() != forest.n_joints {
            return Err(DataError::Alignment {
                expected: forest.n_joints,
                found: frame.joints.len(),
            })
            .context(format!("frame {t} joint count does not match the model"));
        }
        let pred = predict_frame(forest, window.push(frame).values())?;
        let (label, closed) = state.step(t, &pred);
        segments.extend(closed);
        writeln!(out, "{t} {label} {:.6}", pred.mean_loc)?;
        out.flush()?;
        n += 1;
    }
    if n > 0 {
        segments.push(state.finalize());
    }
    writeln!(out, "#segments")?;
    for s in &segments {
        writeln!(out, "{} {} {} {:.6}", s.start, s.end, s.class_id, s.score)?;
    }
    out.flush()?;
    Ok(())
}

fn detect(args: DetectArgs) -> Result<()> {
    let forest = load_model(&args.model)?;
    let beta = gate(&forest, args.beta)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &args.stream {
        Some(path) => {
            let (s, _) = stream::load_skeleton_stream(path)?;
            detect_frames(&forest, beta, s.frames().iter().cloned().map(Ok), &mut out)
        }
        None => {
            let stdin = io::stdin();
            let mut lines = stdin.lock().lines().enumerate().map(|(i, l)| (i + 1, l));
            let header = loop {
                match lines.next() {
                    Some((n, line)) => {
                        let line = line.context("reading standard input")?;
                        if !line.trim().is_empty() {
                            break stream::parse_stream_header(&line, n)?;
                        }
                    }
                    None => bail!(DataError::Format {
                        line: 1,
                        msg: "missing stream header".into()
                    }),
                }
            };
            let frames = lines
                .map(|(n, line)| line.map(|l| (n, l)))
                .take_while(|r| !matches!(r, Ok((_, l)) if l.trim() == "#segments"))
                .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
                .map(|r| {
                    let (n, line) = r.context("reading standard input")?;
                    Ok(stream::parse_frame_line(line.trim(), header.n_joints, n)?)
                });
            detect_frames(&forest, beta, frames, &mut out)
        }
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let forest = load_model(&args.model)?;
    let beta = gate(&forest, args.beta)?;
    let streams: Vec<LabeledStream> = pipeline::load_labeled_dir(&args.streams, None)?;
    let report = pipeline::evaluate(&forest, &streams, beta, args.delta_ms, args.include_background)?;
    out!("streams: {}  frames: {}  beta: {beta:.2}", report.n_streams, report.n_frames);
    out!("frame F1 (overall): {:.4}", report.frame.overall_f1);
    for (c, f) in &report.frame.per_class_f1 {
        out!("  class {c}: {f:.4}");
    }
    out!(
        "event F1 @ {} ms: {:.4} (precision {:.4}, recall {:.4})",
        report.delta_ms, report.event_f1, report.event_precision, report.event_recall
    );
    out!("SL: {:.4}  EL: {:.4}", report.boundary.sl, report.boundary.el);
    out!("--");
    for (k, v) in report.key_values() {
        out!("{k}={v}");
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let forest = load_model(&args.model)?;
    let (s, truth) = stream::load_skeleton_stream(&args.stream)?;
    match &args.sweep_trees {
        None => {
            let stats = benchmark_latency(&forest, &s, args.reps)?;
            out!("trees={}", forest.trees.len());
            out!("frames_timed={}", stats.n_measurements);
            out!("mean_ms={:.6}", stats.mean_ms);
            out!("median_ms={:.6}", stats.median_ms);
            out!("p99_ms={:.6}", stats.p99_ms);
            out!("max_comparisons={}", stats.max_comparisons);
            out!("comparison_bound={}", forest.trees.len() * forest.params.max_depth);
        }
        Some(counts) => {
            let truth = truth.ok_or_else(|| PipelineError::Unlabeled(args.stream.display().to_string()))?;
            let labeled = [LabeledStream {
                stream: s,
                truth,
                contexts: None,
            }];
            out!("trees accuracy mean_ms p99_ms");
            for p in tree_sweep(&forest, &labeled, counts, args.reps)? {
                out!(
                    "{} {:.6} {:.6} {:.6}",
                    p.n_trees, p.accuracy, p.latency.mean_ms, p.latency.p99_ms
                );
            }
        }
    }
    Ok(())
}

fn is_format_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return matches!(e, DataError::Format { .. } | DataError::Alignment { .. });
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return !matches!(e, ModelError::Io { .. });
        }
        cause.downcast_ref::<toml::de::Error>().is_some()
    })
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|c| c.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_format_error(&err) { EXIT_FORMAT } else { EXIT_INPUT })
        }
    }
}
