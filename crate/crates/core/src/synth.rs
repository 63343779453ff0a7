//! Synthetic skeleton datasets with controllable context informativeness.
//!
//! Every class owns a smooth joint trajectory template parameterised by the
//! relative position inside its segment. Classes listed in an ambiguity pair
//! share the first class's template on the middle half of the segment, so
//! only the segment edges (or the context) tell them apart. Spatial context
//! rows are `snr * mu_class + noise` with `|mu_class| = 1` and isotropic noise
//! of unit expected norm.
//!
//! All randomness comes from ChaCha8 seeded through `seed_from_u64`, so a
//! given config reproduces bit-identical output on every platform.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::stream::{ContextMatrix, DataError, GroundTruth, JointFrame, Segment, SkeletonStream};
use crate::{ClassId, BACKGROUND};

/// Fraction of a segment on each side of the shared middle over which an
/// ambiguous class blends from its own template to its partner's.
const BLEND_WIDTH: f64 = 0.15;
const BACKGROUND_AMPLITUDE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Action classes, ids `1..=n_classes`; id 0 is background.
    pub n_classes: usize,
    pub n_joints: usize,
    pub segments_per_stream: usize,
    /// Inclusive `[min, max]` segment length in frames.
    pub frames_per_segment_range: [usize; 2],
    pub noise_scale: f64,
    pub context_dim: usize,
    pub context_snr: f64,
    pub ambiguity_pairs: Vec<[ClassId; 2]>,
    /// Angle in radians through which each class's unit context mean turns
    /// between the start and the end of a segment.
    pub context_drift: f64,
    /// Drives segment layout and noise.
    pub seed: u64,
    /// Drives the class templates and context means; streams meant to be
    /// used together (train and test) must share it.
    pub template_seed: u64,
    pub fps: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 4,
            n_joints: 10,
            segments_per_stream: 8,
            frames_per_segment_range: [30, 60],
            noise_scale: 0.05,
            context_dim: 16,
            context_snr: 4.0,
            ambiguity_pairs: vec![[1, 2]],
            context_drift: 0.0,
            seed: 0,
            template_seed: 0,
            fps: 30.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::Invalid(msg.to_string()));
        if self.n_classes == 0 || self.n_joints == 0 || self.segments_per_stream == 0 || self.context_dim == 0 {
            return bad("counts must be positive");
        }
        let [lo, hi] = self.frames_per_segment_range;
        if lo == 0 || lo > hi {
            return bad("frames_per_segment_range must satisfy 1 <= min <= max");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative");
        }
        if !(self.context_snr >= 0.0 && self.context_snr.is_finite()) {
            return bad("context_snr must be finite and non-negative");
        }
        if !self.context_drift.is_finite() {
            return bad("context_drift must be finite");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        for &[a, b] in &self.ambiguity_pairs {
            let valid = |c: ClassId| c != BACKGROUND && (c as usize) <= self.n_classes;
            if !valid(a) || !valid(b) || a == b {
                return bad("ambiguity pairs must name two distinct action classes");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct JointWave {
    amp: [f64; 2],
    phase: [f64; 2],
}

/// Class trajectory templates and context means derived from `template_seed`.
#[derive(Clone, Debug)]
pub struct ClassTemplates {
    rest: Vec<[f64; 3]>,
    /// `waves[class][joint][coord]`
    waves: Vec<Vec<[JointWave; 3]>>,
    /// Orthonormal pair `(a, b)` per class; the mean at angle `phi` is
    /// `cos(phi) a + sin(phi) b`.
    context_axes: Vec<[Vec<f64>; 2]>,
    context_drift: f64,
    /// `partner[class]` is the class whose template it borrows mid-segment.
    partner: Vec<Option<usize>>,
}

impl ClassTemplates {
    pub fn new(config: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.template_seed);
        let n = config.n_joints;
        let rest: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0)])
            .collect();
        let waves = (0..=config.n_classes)
            .map(|class| {
                let scale = if class == BACKGROUND as usize { BACKGROUND_AMPLITUDE } else { 1.0 };
                (0..n)
                    .map(|_| {
                        std::array::from_fn(|_| JointWave {
                            amp: [scale * rng.random_range(0.2..0.6), scale * rng.random_range(0.05..0.3)],
                            phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
                        })
                    })
                    .collect()
            })
            .collect();
        let d = config.context_dim;
        let unit = |v: Vec<f64>| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
        };
        let context_axes = (0..=config.n_classes)
            .map(|_| {
                let a = unit((0..d).map(|_| rng.sample(StandardNormal)).collect());
                let r: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let dot: f64 = a.iter().zip(&r).map(|(x, y)| x * y).sum();
                let b = if d > 1 {
                    unit(r.iter().zip(&a).map(|(y, x)| y - dot * x).collect())
                } else {
                    vec![0.0]
                };
                [a, b]
            })
            .collect();
        let mut partner = vec![None; config.n_classes + 1];
        for &[a, b] in &config.ambiguity_pairs {
            partner[b as usize] = Some(a as usize);
        }
        ClassTemplates {
            rest,
            waves,
            context_axes,
            context_drift: config.context_drift,
            partner,
        }
    }

    fn own_position(&self, class: usize, tau: f64) -> Vec<[f64; 3]> {
        self.rest
            .iter()
            .zip(&self.waves[class])
            .map(|(rest, waves)| {
                std::array::from_fn(|k| {
                    let w = &waves[k];
                    rest[k] + w.amp[0] * (TAU * tau + w.phase[0]).sin() + w.amp[1] * (2.0 * TAU * tau + w.phase[1]).sin()
                })
            })
            .collect()
    }

    /// Weight of the partner template at relative position `tau`: 1 on the
    /// middle half, easing to 0 over `BLEND_WIDTH` on each side.
    fn share_weight(tau: f64) -> f64 {
        let smooth = |x: f64| {
            let x = x.clamp(0.0, 1.0);
            x * x * (3.0 - 2.0 * x)
        };
        if (0.25..0.75).contains(&tau) {
            1.0
        } else if tau < 0.25 {
            smooth((tau - (0.25 - BLEND_WIDTH)) / BLEND_WIDTH)
        } else {
            smooth(((0.75 + BLEND_WIDTH) - tau) / BLEND_WIDTH)
        }
    }

    /// Noise-free joint positions of `class` at relative position `tau`.
    pub fn position(&self, class: ClassId, tau: f64) -> Vec<[f64; 3]> {
        let class = class as usize;
        let own = self.own_position(class, tau);
        match self.partner[class] {
            None => own,
            Some(p) => {
                let w = Self::share_weight(tau);
                if w == 1.0 {
                    return self.own_position(p, tau);
                }
                let other = self.own_position(p, tau);
                own.iter()
                    .zip(&other)
                    .map(|(a, b)| std::array::from_fn(|k| w * b[k] + (1.0 - w) * a[k]))
                    .collect()
            }
        }
    }

    /// Unit-norm context mean of `class` at relative position `tau`.
    pub fn context_mean(&self, class: ClassId, tau: f64) -> Vec<f64> {
        let [a, b] = &self.context_axes[class as usize];
        let phi = self.context_drift * tau;
        let (s, c) = phi.sin_cos();
        a.iter().zip(b).map(|(x, y)| c * x + s * y).collect()
    }
}

/// One generated stream with its contexts and annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub stream: SkeletonStream,
    pub contexts: ContextMatrix,
    pub truth: GroundTruth,
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData, DataError> {
    config.validate()?;
    let templates = ClassTemplates::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [lo, hi] = config.frames_per_segment_range;

    let mut segments = Vec::with_capacity(config.segments_per_stream);
    let mut start = 0usize;
    let mut prev: Option<ClassId> = None;
    for _ in 0..config.segments_per_stream {
        let len = rng.random_range(lo..=hi);
        let class = loop {
            let c = rng.random_range(0..=config.n_classes as ClassId);
            if Some(c) != prev {
                break c;
            }
        };
        prev = Some(class);
        segments.push(Segment::new(start, start + len - 1, class));
        start += len;
    }
    let total = start;

    let noise_sd = config.noise_scale;
    let ctx_sd = 1.0 / (config.context_dim as f64).sqrt();
    let mut frames = Vec::with_capacity(total);
    let mut ctx = Vec::with_capacity(total * config.context_dim);
    for seg in &segments {
        for t in seg.start..=seg.end {
            let tau = (t - seg.start) as f64 / seg.len() as f64;
            let mean = templates.context_mean(seg.class_id, tau);
            let joints = templates
                .position(seg.class_id, tau)
                .into_iter()
                .map(|p| {
                    std::array::from_fn(|k| {
                        let e: f64 = rng.sample(StandardNormal);
                        p[k] + noise_sd * e
                    })
                })
                .collect();
            frames.push(JointFrame { t, joints });
            for &mu in &mean {
                let e: f64 = rng.sample(StandardNormal);
                ctx.push(config.context_snr * mu + ctx_sd * e);
            }
        }
    }

    let stream = SkeletonStream::new(format!("synth_{}", config.seed), config.fps, frames)?;
    let contexts = ContextMatrix::new(config.context_dim, ctx)?;
    let truth = GroundTruth::from_sparse(&segments, total)?;
    Ok(SyntheticData {
        stream,
        contexts,
        truth,
    })
}

/// `count` streams with seeds `config.seed, config.seed + 1, ...` sharing
/// one set of templates.
pub fn generate_dataset(config: &SynthConfig, count: usize) -> Result<Vec<SyntheticData>, DataError> {
    (0..count as u64)
        .map(|i| {
            let cfg = SynthConfig {
                seed: config.seed.wrapping_add(i),
                ..config.clone()
            };
            generate_synthetic(&cfg)
        })
        .collect()
}
