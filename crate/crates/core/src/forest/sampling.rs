//! Rebalanced bootstrap and random split-candidate generation.

use rand::Rng;

use super::{ForestError, SplitCandidate, TrainingSet};
use crate::ClassId;

/// Draws `labels.len()` indices with replacement, each sample weighted by the
/// inverse of its class size so every present class carries equal mass.
pub fn rebalanced_bootstrap<R: Rng + ?Sized>(labels: &[ClassId], rng: &mut R) -> Result<Vec<usize>, ForestError> {
    if labels.is_empty() {
        return Err(ForestError::EmptyDataset);
    }
    let n_classes = *labels.iter().max().unwrap() as usize + 1;
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y as usize] += 1;
    }
    let mut cdf = Vec::with_capacity(labels.len());
    let mut acc = 0.0;
    for &y in labels {
        acc += 1.0 / counts[y as usize] as f64;
        cdf.push(acc);
    }
    let total = acc;
    Ok((0..labels.len())
        .map(|_| {
            let u = rng.random::<f64>() * total;
            cdf.partition_point(|&c| c <= u).min(labels.len() - 1)
        })
        .collect())
}

/// Collapses a bootstrap draw into `(index, multiplicity)` pairs sorted by index.
pub fn multiplicities(draw: &[usize]) -> Vec<(u32, u32)> {
    let mut sorted = draw.to_vec();
    sorted.sort_unstable();
    let mut out: Vec<(u32, u32)> = Vec::new();
    for idx in sorted {
        match out.last_mut() {
            Some((last, count)) if *last as usize == idx => *count += 1,
            _ => out.push((idx as u32, 1)),
        }
    }
    out
}

/// Lazily computed per-feature value range over one node's samples.
struct RangeCache<'a> {
    set: &'a TrainingSet,
    rows: &'a [u32],
    ranges: Vec<Option<(f64, f64)>>,
}

impl<'a> RangeCache<'a> {
    fn new(set: &'a TrainingSet, rows: &'a [u32]) -> Self {
        RangeCache {
            set,
            rows,
            ranges: vec![None; set.feature_dim()],
        }
    }

    fn get(&mut self, gamma: usize) -> (f64, f64) {
        if let Some(r) = self.ranges[gamma] {
            return r;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &r in self.rows {
            let v = self.set.feature(r as usize)[gamma];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        self.ranges[gamma] = Some((lo, hi));
        (lo, hi)
    }
}

/// Random `(gamma, t)` candidates with `t` strictly inside the observed range
/// of feature `gamma`, so every candidate sends samples both ways.
///
/// Returns [`ForestError::ConstantFeatures`] when no feature varies.
pub fn generate_candidates<R: Rng + ?Sized>(
    set: &TrainingSet,
    rows: &[u32],
    n_candidates: usize,
    rng: &mut R,
) -> Result<Vec<SplitCandidate>, ForestError> {
    if rows.len() < 2 {
        return Err(ForestError::TooFewSamples(rows.len()));
    }
    let dim = set.feature_dim();
    let mut cache = RangeCache::new(set, rows);
    let max_attempts = 8 * n_candidates + 32;
    let mut out = Vec::with_capacity(n_candidates);
    let mut attempts = 0;
    while out.len() < n_candidates && attempts < max_attempts {
        attempts += 1;
        let gamma = rng.random_range(0..dim);
        let (lo, hi) = cache.get(gamma);
        if !(lo < hi) {
            continue;
        }
        let t = rng.random_range(lo..hi);
        if t <= lo {
            continue;
        }
        out.push(SplitCandidate { gamma: gamma as u32, t });
    }
    if out.len() < n_candidates {
        // Retries ran out: finish from the features known to vary.
        let varying: Vec<usize> = (0..dim)
            .filter(|&g| {
                let (lo, hi) = cache.get(g);
                let mid = lo + 0.5 * (hi - lo);
                lo < mid && mid < hi
            })
            .collect();
        if varying.is_empty() {
            return Err(ForestError::ConstantFeatures);
        }
        while out.len() < n_candidates {
            let gamma = varying[rng.random_range(0..varying.len())];
            let (lo, hi) = cache.get(gamma);
            let t = rng.random_range(lo..hi);
            if t > lo {
                out.push(SplitCandidate { gamma: gamma as u32, t });
            }
        }
    }
    Ok(out)
}

/// Every midpoint between consecutive distinct observed values, for every
/// feature, in `(gamma, t)` order.
pub fn exhaustive_candidates(set: &TrainingSet, rows: &[u32]) -> Result<Vec<SplitCandidate>, ForestError> {
    if rows.len() < 2 {
        return Err(ForestError::TooFewSamples(rows.len()));
    }
    let mut out = Vec::new();
    let mut values = Vec::with_capacity(rows.len());
    for gamma in 0..set.feature_dim() {
        values.clear();
        values.extend(rows.iter().map(|&r| set.feature(r as usize)[gamma]));
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            if t < w[1] {
                out.push(SplitCandidate { gamma: gamma as u32, t });
            }
        }
    }
    if out.is_empty() {
        return Err(ForestError::ConstantFeatures);
    }
    Ok(out)
}
