//! Split objectives. All of them are costs: lower is better.

use rand::seq::index;
use rand::Rng;

use super::{Entry, SplitCandidate, Subspace, TrainingSet};
use crate::spectral::{self, SpectralError};
use crate::ClassId;

/// `-sum n_y ln(n_y / N)` over one child's (weighted) class counts.
pub fn class_entropy_mass(hist: &[f64]) -> f64 {
    let total: f64 = hist.iter().sum();
    let mut acc = 0.0;
    if total > 0.0 {
        for &n in hist {
            if n > 0.0 {
                acc -= n * (n / total).ln();
            }
        }
    }
    acc
}

/// Unary (entropy) objective over unit-weight labels of the two children.
pub fn objective_unary(left: &[ClassId], right: &[ClassId]) -> f64 {
    let hist = |labels: &[ClassId]| {
        let n = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut h = vec![0.0; n];
        for &y in labels {
            h[y as usize] += 1.0;
        }
        h
    };
    class_entropy_mass(&hist(left)) + class_entropy_mass(&hist(right))
}

fn spread<P: AsRef<[f64]>>(points: &[P], weights: &[f64], squared: bool) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let dim = first.as_ref().len();
    let mut mean = vec![0.0; dim];
    let mut total = 0.0;
    for (p, &w) in points.iter().zip(weights) {
        total += w;
        for (m, v) in mean.iter_mut().zip(p.as_ref()) {
            *m += w * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    points
        .iter()
        .zip(weights)
        .map(|(p, &w)| {
            let sq: f64 = p.as_ref().iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum();
            w * if squared { sq } else { sq.sqrt() }
        })
        .sum()
}

/// Higher-order objective: each child's summed L2 distance of its contexts to
/// the child mean.
pub fn objective_higher<P: AsRef<[f64]>>(left: &[P], right: &[P]) -> f64 {
    spread(left, &vec![1.0; left.len()], false) + spread(right, &vec![1.0; right.len()], false)
}

/// Fiedler-vector objective: each child's summed squared deviation of the
/// embedding from the child mean.
pub fn objective_fiedler(left: &[f64], right: &[f64]) -> f64 {
    let one = |e: &[f64]| {
        if e.is_empty() {
            return 0.0;
        }
        let mu = e.iter().sum::<f64>() / e.len() as f64;
        e.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>()
    };
    one(left) + one(right)
}

/// Scores of the reference split and of each candidate.
#[derive(Clone, Debug)]
pub struct Scores {
    pub reference: f64,
    pub candidates: Vec<f64>,
}

impl Scores {
    /// Index of the lowest score; earlier candidates win ties.
    pub fn best(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &s) in self.candidates.iter().enumerate() {
            if best.is_none_or(|b| s < self.candidates[b]) {
                best = Some(i);
            }
        }
        best
    }
}

fn goes_left(set: &TrainingSet, row: u32, c: &SplitCandidate) -> bool {
    set.feature(row as usize)[c.gamma as usize] <= c.t
}

pub fn unary_scores(set: &TrainingSet, entries: &[Entry], candidates: &[SplitCandidate]) -> Scores {
    let k = set.n_classes();
    let mut all = vec![0.0; k];
    for e in entries {
        all[set.label(e.row as usize) as usize] += e.weight;
    }
    let mut left = vec![0.0; k];
    let mut right = vec![0.0; k];
    let candidates = candidates
        .iter()
        .map(|c| {
            left.fill(0.0);
            right.fill(0.0);
            for e in entries {
                let y = set.label(e.row as usize) as usize;
                if goes_left(set, e.row, c) {
                    left[y] += e.weight;
                } else {
                    right[y] += e.weight;
                }
            }
            class_entropy_mass(&left) + class_entropy_mass(&right)
        })
        .collect();
    Scores {
        reference: class_entropy_mass(&all),
        candidates,
    }
}

pub fn higher_scores(
    set: &TrainingSet,
    entries: &[Entry],
    candidates: &[SplitCandidate],
    subspace: Subspace,
    squared: bool,
) -> Scores {
    let points: Vec<&[f64]> = entries.iter().map(|e| set.context(e.row as usize, subspace)).collect();
    let weights: Vec<f64> = entries.iter().map(|e| e.weight).collect();
    let mut lp = Vec::with_capacity(points.len());
    let mut lw = Vec::with_capacity(points.len());
    let mut rp = Vec::with_capacity(points.len());
    let mut rw = Vec::with_capacity(points.len());
    let candidates = candidates
        .iter()
        .map(|c| {
            lp.clear();
            lw.clear();
            rp.clear();
            rw.clear();
            for (i, e) in entries.iter().enumerate() {
                if goes_left(set, e.row, c) {
                    lp.push(points[i]);
                    lw.push(weights[i]);
                } else {
                    rp.push(points[i]);
                    rw.push(weights[i]);
                }
            }
            spread(&lp, &lw, squared) + spread(&rp, &rw, squared)
        })
        .collect();
    Scores {
        reference: spread(&points, &weights, squared),
        candidates,
    }
}

fn weighted_fiedler_cost(sums: [f64; 3]) -> f64 {
    let [w, we, we2] = sums;
    if w > 0.0 {
        (we2 - we * we / w).max(0.0)
    } else {
        0.0
    }
}

/// Fiedler-embedding scores on at most `m_max` node samples (uniformly
/// subsampled with `rng` when the node is larger).
pub fn pairwise_scores<R: Rng + ?Sized>(
    set: &TrainingSet,
    entries: &[Entry],
    candidates: &[SplitCandidate],
    subspace: Subspace,
    m_max: usize,
    rng: &mut R,
) -> Result<Scores, SpectralError> {
    let sub: Vec<Entry> = if entries.len() > m_max {
        let mut picked = index::sample(rng, entries.len(), m_max).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| entries[i]).collect()
    } else {
        entries.to_vec()
    };
    if sub.len() < 3 {
        return Err(SpectralError::TooFewSamples { needed: 3, got: sub.len() });
    }
    let points: Vec<&[f64]> = sub.iter().map(|e| set.context(e.row as usize, subspace)).collect();
    let (_, affinity) = spectral::affinity_with_mean_sigma(&points)?;
    let laplacian = spectral::normalized_laplacian(&affinity)?;
    let embedding = spectral::fiedler_embedding(&laplacian)?;
    let e = embedding.values;

    let mut all = [0.0; 3];
    for (entry, &v) in sub.iter().zip(&e) {
        let w = entry.weight;
        all[0] += w;
        all[1] += w * v;
        all[2] += w * v * v;
    }
    let candidates = candidates
        .iter()
        .map(|c| {
            let mut left = [0.0; 3];
            for (entry, &v) in sub.iter().zip(&e) {
                if goes_left(set, entry.row, c) {
                    let w = entry.weight;
                    left[0] += w;
                    left[1] += w * v;
                    left[2] += w * v * v;
                }
            }
            let right = [all[0] - left[0], all[1] - left[1], all[2] - left[2]];
            weighted_fiedler_cost(left) + weighted_fiedler_cost(right)
        })
        .collect();
    Ok(Scores {
        reference: weighted_fiedler_cost(all),
        candidates,
    })
}
