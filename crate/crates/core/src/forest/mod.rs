//! Context-guided random forest.
//!
//! Split functions only ever test skeleton features, `x[gamma] <= t` going
//! left. Contexts enter training through the objective used to pick among
//! candidate splits: at every node one of five costs is drawn at random
//! (entropy, Fiedler-vector or group-spread cost on the spatial or the
//! temporal context) and the node becomes a leaf when the best candidate does
//! not beat the reference split that keeps all samples together.

pub mod model;
pub mod objectives;
pub mod sampling;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::ContextVector;
use crate::ClassId;

pub use objectives::{objective_fiedler, objective_higher, objective_unary};
pub use sampling::{exhaustive_candidates, generate_candidates, rebalanced_bootstrap};

/// Smallest information gain that justifies a split.
pub const GAIN_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("need at least 2 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("all features are constant across the node's samples")]
    ConstantFeatures,
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// One training frame: skeleton feature, privileged context, label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub feature: Vec<f64>,
    pub context: ContextVector,
    pub label: ClassId,
    pub weight: f64,
}

/// Column-friendly copy of the training samples.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    feature_dim: usize,
    spatial_dim: usize,
    n_classes: usize,
    features: Vec<f64>,
    spatial: Vec<f64>,
    temporal: Vec<f64>,
    labels: Vec<ClassId>,
    weights: Vec<f64>,
}

impl TrainingSet {
    /// `n_classes` widens the label set beyond the largest label present.
    pub fn new(samples: Vec<TrainSample>, n_classes: Option<usize>) -> Result<Self, ForestError> {
        let first = samples.first().ok_or(ForestError::EmptyDataset)?;
        let feature_dim = first.feature.len();
        let spatial_dim = first.context.spatial.len();
        if feature_dim == 0 {
            return Err(ForestError::InvalidSample {
                index: 0,
                reason: "empty feature vector".into(),
            });
        }
        let max_label = samples.iter().map(|s| s.label).max().unwrap() as usize;
        let n_classes = n_classes.unwrap_or(0).max(max_label + 1);
        let mut set = TrainingSet {
            feature_dim,
            spatial_dim,
            n_classes,
            features: Vec::with_capacity(samples.len() * feature_dim),
            spatial: Vec::with_capacity(samples.len() * spatial_dim),
            temporal: Vec::with_capacity(samples.len()),
            labels: Vec::with_capacity(samples.len()),
            weights: Vec::with_capacity(samples.len()),
        };
        for (index, s) in samples.into_iter().enumerate() {
            let bad = |reason: &str| ForestError::InvalidSample {
                index,
                reason: reason.to_string(),
            };
            if s.feature.len() != feature_dim {
                return Err(bad("feature dimension differs from the first sample"));
            }
            if s.context.spatial.len() != spatial_dim {
                return Err(bad("spatial context dimension differs from the first sample"));
            }
            if s.feature.iter().chain(&s.context.spatial).any(|v| !v.is_finite()) {
                return Err(bad("non-finite value"));
            }
            if !(0.0..=1.0).contains(&s.context.temporal) {
                return Err(bad("temporal context outside [0, 1]"));
            }
            if !(s.weight > 0.0 && s.weight.is_finite()) {
                return Err(bad("weight must be positive"));
            }
            set.features.extend_from_slice(&s.feature);
            set.spatial.extend_from_slice(&s.context.spatial);
            set.temporal.push(s.context.temporal);
            set.labels.push(s.label);
            set.weights.push(s.weight);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn context(&self, i: usize, subspace: Subspace) -> &[f64] {
        match subspace {
            Subspace::Spatial => &self.spatial[i * self.spatial_dim..(i + 1) * self.spatial_dim],
            Subspace::Temporal => std::slice::from_ref(&self.temporal[i]),
        }
    }

    pub fn temporal(&self, i: usize) -> f64 {
        self.temporal[i]
    }

    pub fn label(&self, i: usize) -> ClassId {
        self.labels[i]
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

/// A sample reaching a node: `count` bootstrap copies, total `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub row: u32,
    pub count: u32,
    pub weight: f64,
}

impl Entry {
    pub fn all(set: &TrainingSet) -> Vec<Entry> {
        (0..set.len())
            .map(|i| Entry {
                row: i as u32,
                count: 1,
                weight: set.weight(i),
            })
            .collect()
    }
}

/// `x[gamma] <= t` goes left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitCandidate {
    pub gamma: u32,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subspace {
    Spatial,
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Unary,
    Pairwise(Subspace),
    Higher(Subspace),
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Unary,
        Objective::Pairwise(Subspace::Spatial),
        Objective::Pairwise(Subspace::Temporal),
        Objective::Higher(Subspace::Spatial),
        Objective::Higher(Subspace::Temporal),
    ];
}

/// Sampling weights over [`Objective::ALL`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights(pub [f64; 5]);

impl ObjectiveWeights {
    pub fn unary_only() -> Self {
        ObjectiveWeights([1.0, 0.0, 0.0, 0.0, 0.0])
    }

    pub fn validate(&self) -> Result<(), ForestError> {
        if self.0.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ForestError::InvalidParams("objective weights must be finite and non-negative".into()));
        }
        if self.0.iter().all(|&w| w == 0.0) {
            return Err(ForestError::InvalidParams("objective weights are all zero".into()));
        }
        Ok(())
    }

    pub fn uses_spatial(&self) -> bool {
        self.0[1] > 0.0 || self.0[3] > 0.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Objective {
        let total: f64 = self.0.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut last = Objective::Unary;
        for (w, o) in self.0.iter().zip(Objective::ALL) {
            if *w <= 0.0 {
                continue;
            }
            acc += w;
            last = o;
            if u < acc {
                return o;
            }
        }
        last
    }
}

/// Objective mixes of the ablation: entropy only, entropy plus temporal
/// context, entropy plus both contexts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Rf,
    RfT,
    RfSt,
}

impl Mode {
    pub fn weights(self) -> ObjectiveWeights {
        match self {
            Mode::Rf => ObjectiveWeights::unary_only(),
            Mode::RfT => ObjectiveWeights([1.0, 0.0, 1.0, 0.0, 1.0]),
            Mode::RfSt => ObjectiveWeights([1.0; 5]),
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rf" => Ok(Mode::Rf),
            "rf+t" => Ok(Mode::RfT),
            "rf+st" => Ok(Mode::RfSt),
            other => Err(format!("unknown mode `{other}` (expected rf, rf+t or rf+st)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Rf => "rf",
            Mode::RfT => "rf+t",
            Mode::RfSt => "rf+st",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateMode {
    /// `n_candidates` random thresholds per node.
    Random,
    /// Every midpoint of every feature.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Nodes with at most this many distinct samples become leaves.
    pub min_samples: usize,
    pub n_candidates: usize,
    pub objective_weights: ObjectiveWeights,
    /// Fiedler embeddings are computed on at most this many node samples.
    pub m_max: usize,
    pub deriv_lag: usize,
    pub seed: u64,
    pub candidate_mode: CandidateMode,
    /// Use squared distances in the group-spread objective.
    pub squared_higher: bool,
    /// Train each tree on a class-rebalanced bootstrap draw.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 50,
            max_depth: 100,
            min_samples: 1,
            n_candidates: 64,
            objective_weights: Mode::RfSt.weights(),
            m_max: 256,
            deriv_lag: 1,
            seed: 0,
            candidate_mode: CandidateMode::Random,
            squared_higher: false,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<(), ForestError> {
        let bad = |m: &str| Err(ForestError::InvalidParams(m.to_string()));
        if self.n_trees == 0 {
            return bad("n_trees must be positive");
        }
        if self.min_samples == 0 {
            return bad("min_samples must be positive");
        }
        if self.n_candidates == 0 {
            return bad("n_candidates must be positive");
        }
        if self.m_max < 3 {
            return bad("m_max must be at least 3");
        }
        if self.deriv_lag == 0 {
            return bad("deriv_lag must be positive");
        }
        self.objective_weights.validate()
    }
}

/// Class distribution and mean temporal location of the samples in a leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafStats {
    pub class_dist: Vec<f64>,
    pub mean_loc: f64,
    pub n_samples: u64,
}

impl LeafStats {
    fn accumulate(n_classes: usize, items: impl Iterator<Item = (ClassId, f64, f64, u64)>) -> Self {
        let mut dist = vec![0.0; n_classes];
        let mut loc = 0.0;
        let mut total = 0.0;
        let mut n = 0u64;
        for (label, loc_t, weight, count) in items {
            dist[label as usize] += weight;
            loc += weight * loc_t;
            total += weight;
            n += count;
        }
        assert!(total > 0.0, "leaf statistics need at least one sample");
        dist.iter_mut().for_each(|d| *d /= total);
        LeafStats {
            class_dist: dist,
            mean_loc: (loc / total).clamp(0.0, 1.0),
            n_samples: n,
        }
    }

    pub(crate) fn from_entries(set: &TrainingSet, entries: &[Entry]) -> Self {
        Self::accumulate(
            set.n_classes(),
            entries.iter().map(|e| {
                let r = e.row as usize;
                (set.label(r), set.temporal(r), e.weight, e.count as u64)
            }),
        )
    }
}

/// Leaf statistics over plain samples: weighted class frequencies and the
/// weighted mean of the temporal context.
pub fn leaf_statistics(samples: &[TrainSample], n_classes: usize) -> LeafStats {
    let n_classes = samples
        .iter()
        .map(|s| s.label as usize + 1)
        .max()
        .unwrap_or(0)
        .max(n_classes);
    LeafStats::accumulate(
        n_classes,
        samples.iter().map(|s| (s.label, s.context.temporal, s.weight, 1)),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    /// Left child is the next node in preorder; `right` indexes the right child.
    Split { gamma: u32, t: f64, right: u32 },
    Leaf(LeafStats),
}

/// A binary tree stored in preorder.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub(crate) fn from_nodes(nodes: Vec<Node>) -> Self {
        Tree { nodes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn traverse(&self, x: &[f64]) -> &LeafStats {
        let mut comparisons = 0;
        self.traverse_counted(x, &mut comparisons)
    }

    /// Like [`Tree::traverse`], adding the number of split tests to `comparisons`.
    pub fn traverse_counted(&self, x: &[f64], comparisons: &mut u64) -> &LeafStats {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf(stats) => return stats,
                Node::Split { gamma, t, right } => {
                    *comparisons += 1;
                    i = if x[*gamma as usize] <= *t { i + 1 } else { *right as usize };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> (usize, usize) {
            match &nodes[i] {
                Node::Leaf(_) => (0, i + 1),
                Node::Split { right, .. } => {
                    let (dl, _) = walk(nodes, i + 1);
                    let (dr, end) = walk(nodes, *right as usize);
                    (1 + dl.max(dr), end)
                }
            }
        }
        walk(&self.nodes, 0).0
    }

    pub fn leaves(&self) -> impl Iterator<Item = &LeafStats> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf(s) => Some(s),
            Node::Split { .. } => None,
        })
    }

    pub fn split_features(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { gamma, .. } => Some(*gamma),
            Node::Leaf(_) => None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafReason {
    DepthLimit,
    MinSamples,
    ConstantFeatures,
    NoGain,
}

#[derive(Clone, Debug)]
pub enum NodeDecision {
    Leaf(LeafReason),
    Split {
        candidate: SplitCandidate,
        /// Objective the split was scored with (after any fallback).
        objective: Objective,
        gain: f64,
        left: Vec<Entry>,
        right: Vec<Entry>,
    },
}

/// Decides one node: reference split, candidates, sampled objective, best
/// candidate, information gain.
pub fn train_node<R: Rng + ?Sized>(
    set: &TrainingSet,
    entries: &[Entry],
    depth: usize,
    params: &ForestParams,
    rng: &mut R,
) -> NodeDecision {
    if depth >= params.max_depth {
        return NodeDecision::Leaf(LeafReason::DepthLimit);
    }
    if entries.len() <= params.min_samples {
        return NodeDecision::Leaf(LeafReason::MinSamples);
    }
    let rows: Vec<u32> = entries.iter().map(|e| e.row).collect();
    let candidates = match params.candidate_mode {
        CandidateMode::Random => generate_candidates(set, &rows, params.n_candidates, rng),
        CandidateMode::Exhaustive => exhaustive_candidates(set, &rows),
    };
    let Ok(mut candidates) = candidates else {
        return NodeDecision::Leaf(LeafReason::ConstantFeatures);
    };
    candidates.sort_by(|a, b| a.gamma.cmp(&b.gamma).then(a.t.total_cmp(&b.t)));

    let sampled = params.objective_weights.sample(rng);
    let (objective, scores) = match sampled {
        Objective::Unary => (sampled, objectives::unary_scores(set, entries, &candidates)),
        Objective::Higher(sub) => (
            sampled,
            objectives::higher_scores(set, entries, &candidates, sub, params.squared_higher),
        ),
        Objective::Pairwise(sub) => {
            match objectives::pairwise_scores(set, entries, &candidates, sub, params.m_max, rng) {
                Ok(scores) => (sampled, scores),
                Err(_) => (Objective::Unary, objectives::unary_scores(set, entries, &candidates)),
            }
        }
    };
    let best = scores.best().expect("candidate list is non-empty");
    let gain = scores.reference - scores.candidates[best];
    if !(gain > GAIN_EPSILON) {
        return NodeDecision::Leaf(LeafReason::NoGain);
    }
    let candidate = candidates[best];
    let (left, right): (Vec<Entry>, Vec<Entry>) = entries
        .iter()
        .partition(|e| set.feature(e.row as usize)[candidate.gamma as usize] <= candidate.t);
    NodeDecision::Split {
        candidate,
        objective,
        gain,
        left,
        right,
    }
}

/// SplitMix64-style mixing of two words, for deriving child seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ROOT_KEY: u64 = 0x0123_4567_89AB_CDEF;
const BOOTSTRAP_KEY: u64 = 0xB007_5742_B007_5742;

fn grow(set: &TrainingSet, entries: &[Entry], depth: usize, key: u64, params: &ForestParams, nodes: &mut Vec<Node>) {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    match train_node(set, entries, depth, params, &mut rng) {
        NodeDecision::Leaf(_) => nodes.push(Node::Leaf(LeafStats::from_entries(set, entries))),
        NodeDecision::Split {
            candidate, left, right, ..
        } => {
            let at = nodes.len();
            nodes.push(Node::Split {
                gamma: candidate.gamma,
                t: candidate.t,
                right: 0,
            });
            grow(set, &left, depth + 1, mix_seed(key, 1), params, nodes);
            let right_at = nodes.len() as u32;
            if let Node::Split { right: r, .. } = &mut nodes[at] {
                *r = right_at;
            }
            grow(set, &right, depth + 1, mix_seed(key, 2), params, nodes);
        }
    }
}

/// Grows one tree from the given node entries. Node randomness is derived
/// from `tree_seed` and the node's path, never from sibling order.
pub fn grow_tree(set: &TrainingSet, entries: &[Entry], params: &ForestParams, tree_seed: u64) -> Tree {
    let mut nodes = Vec::new();
    grow(set, entries, 0, mix_seed(tree_seed, ROOT_KEY), params, &mut nodes);
    Tree { nodes }
}

/// Ensemble of trees plus what inference needs to know about its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    pub params: ForestParams,
    pub n_joints: usize,
    pub n_classes: usize,
    /// Localization gate chosen by calibration.
    pub beta: Option<f64>,
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn feature_dim(&self) -> usize {
        9 * self.n_joints
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<(), ForestError> {
        if x.len() != self.feature_dim() {
            return Err(ForestError::DimensionMismatch {
                expected: self.feature_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// The first `n` trees as a forest of their own.
    pub fn truncated(&self, n: usize) -> Forest {
        Forest {
            trees: self.trees[..n.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }
}

pub fn train_forest(set: &TrainingSet, params: &ForestParams) -> Result<Forest, ForestError> {
    params.validate()?;
    if set.is_empty() {
        return Err(ForestError::EmptyDataset);
    }
    if !set.feature_dim().is_multiple_of(9) {
        return Err(ForestError::InvalidParams(format!(
            "feature dimension {} is not 9 x joints",
            set.feature_dim()
        )));
    }
    if params.objective_weights.uses_spatial() && set.spatial_dim() == 0 {
        return Err(ForestError::InvalidParams(
            "spatial objectives requested but samples carry no spatial context".into(),
        ));
    }
    let trees = (0..params.n_trees)
        .map(|i| {
            let tree_seed = mix_seed(params.seed, i as u64 + 1);
            let entries = if params.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tree_seed, BOOTSTRAP_KEY));
                let draw = rebalanced_bootstrap(set.labels(), &mut rng)?;
                sampling::multiplicities(&draw)
                    .into_iter()
                    .map(|(row, count)| Entry {
                        row,
                        count,
                        weight: count as f64 * set.weight(row as usize),
                    })
                    .collect()
            } else {
                Entry::all(set)
            };
            Ok(grow_tree(set, &entries, params, tree_seed))
        })
        .collect::<Result<Vec<Tree>, ForestError>>()?;
    Ok(Forest {
        params: params.clone(),
        n_joints: set.feature_dim() / 9,
        n_classes: set.n_classes(),
        beta: None,
        trees,
    })
}
