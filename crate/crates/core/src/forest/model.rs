//! Binary model files.
//!
//! Layout, all little-endian with floats on 8-byte boundaries:
//!
//! ```text
//! "OADF" | version u16 | reserved u16
//! n_joints n_classes n_trees max_depth min_samples n_candidates m_max
//!   deriv_lag candidate_mode flags            (u32 each)
//! seed u64 | objective weights 5 x f64 | beta f64 | tree count u32 | pad u32
//! per tree: node count u64, nodes in preorder
//!   split: tag u32 = 1 | gamma u32 | t f64
//!   leaf:  tag u32 = 0 | pad u32 | class_dist n_classes x f64 | mean_loc f64 | n u64
//! CRC-64/XZ of everything above, u64
//! ```

use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_XZ};
use thiserror::Error;

use super::{CandidateMode, Forest, ForestParams, LeafStats, Node, ObjectiveWeights, Tree};

pub const MAGIC: [u8; 4] = *b"OADF";
pub const FORMAT_VERSION: u16 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

const FLAG_SQUARED_HIGHER: u32 = 1;
const FLAG_BOOTSTRAP: u32 = 1 << 1;
const FLAG_HAS_BETA: u32 = 1 << 2;

const TAG_LEAF: u32 = 0;
const TAG_SPLIT: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot access model file {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),
    #[error("model file is truncated")]
    Truncated,
    #[error("model checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed model: {0}")]
    Malformed(String),
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, ModelError> {
    Err(ModelError::Malformed(msg.into()))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> u32 {
    u32::try_from(v).unwrap_or_else(|_| panic!("{what} does not fit in u32"))
}

pub fn serialize(forest: &Forest) -> Vec<u8> {
    let p = &forest.params;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(0);
    w.u32(to_u32(forest.n_joints, "n_joints"));
    w.u32(to_u32(forest.n_classes, "n_classes"));
    w.u32(to_u32(p.n_trees, "n_trees"));
    w.u32(to_u32(p.max_depth, "max_depth"));
    w.u32(to_u32(p.min_samples, "min_samples"));
    w.u32(to_u32(p.n_candidates, "n_candidates"));
    w.u32(to_u32(p.m_max, "m_max"));
    w.u32(to_u32(p.deriv_lag, "deriv_lag"));
    w.u32(match p.candidate_mode {
        CandidateMode::Random => 0,
        CandidateMode::Exhaustive => 1,
    });
    let mut flags = 0;
    if p.squared_higher {
        flags |= FLAG_SQUARED_HIGHER;
    }
    if p.bootstrap {
        flags |= FLAG_BOOTSTRAP;
    }
    if forest.beta.is_some() {
        flags |= FLAG_HAS_BETA;
    }
    w.u32(flags);
    w.u64(p.seed);
    for v in p.objective_weights.0 {
        w.f64(v);
    }
    w.f64(forest.beta.unwrap_or(0.0));
    w.u32(to_u32(forest.trees.len(), "tree count"));
    w.u32(0);
    for tree in &forest.trees {
        w.u64(tree.nodes.len() as u64);
        for node in &tree.nodes {
            match node {
                Node::Split { gamma, t, .. } => {
                    w.u32(TAG_SPLIT);
                    w.u32(*gamma);
                    w.f64(*t);
                }
                Node::Leaf(s) => {
                    w.u32(TAG_LEAF);
                    w.u32(0);
                    for d in &s.class_dist {
                        w.f64(*d);
                    }
                    w.f64(s.mean_loc);
                    w.u64(s.n_samples);
                }
            }
        }
    }
    let crc = CRC64.checksum(&w.0);
    w.u64(crc);
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        let end = self.pos.checked_add(N).ok_or(ModelError::Truncated)?;
        let bytes = self.buf.get(self.pos..end).ok_or(ModelError::Truncated)?;
        self.pos = end;
        Ok(bytes.try_into().unwrap())
    }
    fn u16(&mut self) -> Result<u16, ModelError> {
        self.take().map(u16::from_le_bytes)
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        self.take().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        self.take().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        self.take().map(f64::from_le_bytes)
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<Forest, ModelError> {
    if bytes.len() < 4 {
        return Err(if MAGIC.starts_with(bytes) {
            ModelError::Truncated
        } else {
            ModelError::BadMagic
        });
    }
    if bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut head = Reader { buf: bytes, pos: 4 };
    let version = head.u16()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    if bytes.len() < 8 + 8 {
        return Err(ModelError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 8 };
    let n_joints = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let n_trees = r.u32()? as usize;
    let max_depth = r.u32()? as usize;
    let min_samples = r.u32()? as usize;
    let n_candidates = r.u32()? as usize;
    let m_max = r.u32()? as usize;
    let deriv_lag = r.u32()? as usize;
    let candidate_mode = match r.u32()? {
        0 => CandidateMode::Random,
        1 => CandidateMode::Exhaustive,
        other => return malformed(format!("unknown candidate mode {other}")),
    };
    let flags = r.u32()?;
    if flags & !(FLAG_SQUARED_HIGHER | FLAG_BOOTSTRAP | FLAG_HAS_BETA) != 0 {
        return malformed(format!("unknown flags {flags:#x}"));
    }
    let seed = r.u64()?;
    let mut weights = [0.0; 5];
    for w in &mut weights {
        *w = r.f64()?;
    }
    let beta_raw = r.f64()?;
    let beta = if flags & FLAG_HAS_BETA != 0 {
        if !(0.0..=0.5).contains(&beta_raw) {
            return malformed(format!("beta {beta_raw} outside [0, 0.5]"));
        }
        Some(beta_raw)
    } else {
        None
    };
    let tree_count = r.u32()? as usize;
    r.u32()?;
    if n_joints == 0 || n_classes == 0 {
        return malformed("header declares zero joints or classes");
    }
    if tree_count == 0 {
        return malformed("model has no trees");
    }
    let params = ForestParams {
        n_trees,
        max_depth,
        min_samples,
        n_candidates,
        objective_weights: ObjectiveWeights(weights),
        m_max,
        deriv_lag,
        seed,
        candidate_mode,
        squared_higher: flags & FLAG_SQUARED_HIGHER != 0,
        bootstrap: flags & FLAG_BOOTSTRAP != 0,
    };
    if let Err(e) = params.validate() {
        return malformed(e.to_string());
    }

    let feature_dim = 9 * n_joints;
    let leaf_bytes = 8 + 8 * n_classes + 16;
    let mut trees = Vec::with_capacity(tree_count.min(r.remaining() / 16));
    for ti in 0..tree_count {
        let n_nodes = r.u64()?;
        if n_nodes == 0 || n_nodes > (r.remaining() / 16) as u64 {
            return if n_nodes == 0 {
                malformed(format!("tree {ti} is empty"))
            } else {
                Err(ModelError::Truncated)
            };
        }
        let mut nodes = Vec::with_capacity(n_nodes as usize);
        for _ in 0..n_nodes {
            match r.u32()? {
                TAG_SPLIT => {
                    let gamma = r.u32()?;
                    let t = r.f64()?;
                    if gamma as usize >= feature_dim {
                        return malformed(format!("split feature {gamma} outside 0..{feature_dim}"));
                    }
                    if t.is_nan() {
                        return malformed("NaN split threshold");
                    }
                    nodes.push(Node::Split { gamma, t, right: 0 });
                }
                TAG_LEAF => {
                    if r.remaining() + 4 < leaf_bytes {
                        return Err(ModelError::Truncated);
                    }
                    r.u32()?;
                    let mut class_dist = Vec::with_capacity(n_classes);
                    for _ in 0..n_classes {
                        class_dist.push(r.f64()?);
                    }
                    let mean_loc = r.f64()?;
                    let n_samples = r.u64()?;
                    if class_dist.iter().any(|d| !(0.0..=1.0).contains(d)) || !(0.0..=1.0).contains(&mean_loc) {
                        return malformed("leaf statistics out of range");
                    }
                    nodes.push(Node::Leaf(LeafStats {
                        class_dist,
                        mean_loc,
                        n_samples,
                    }));
                }
                tag => return malformed(format!("unknown node tag {tag}")),
            }
        }
        link_preorder(&mut nodes).map_err(|m| ModelError::Malformed(format!("tree {ti}: {m}")))?;
        trees.push(Tree::from_nodes(nodes));
    }
    if r.remaining() != 0 {
        return malformed(format!("{} trailing bytes after the last tree", r.remaining()));
    }
    Ok(Forest {
        params,
        n_joints,
        n_classes,
        beta,
        trees,
    })
}

/// Fills in right-child indices of a preorder node list and checks that it
/// forms exactly one complete binary tree.
fn link_preorder(nodes: &mut [Node]) -> Result<(), String> {
    // Explicit stack of split indices still waiting for their right child.
    let mut pending: Vec<usize> = Vec::new();
    for i in 0..nodes.len() {
        if i > 0 {
            let parent_needs_right = matches!(nodes[i - 1], Node::Leaf(_));
            if parent_needs_right {
                let Some(p) = pending.pop() else {
                    return Err(format!("node {i} follows a complete tree"));
                };
                if let Node::Split { right, .. } = &mut nodes[p] {
                    *right = i as u32;
                }
            }
        }
        if matches!(nodes[i], Node::Split { .. }) {
            pending.push(i);
        }
    }
    if !pending.is_empty() || !matches!(nodes.last(), Some(Node::Leaf(_))) {
        return Err("preorder node list ends inside the tree".into());
    }
    Ok(())
}

pub fn save_model(forest: &Forest, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, serialize(forest)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<Forest, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    deserialize(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(p: f64, loc: f64) -> Node {
        Node::Leaf(LeafStats {
            class_dist: vec![1.0 - p, p],
            mean_loc: loc,
            n_samples: 3,
        })
    }

    fn small_forest() -> Forest {
        let tree = Tree {
            nodes: vec![
                Node::Split { gamma: 4, t: 0.25, right: 4 },
                Node::Split { gamma: 0, t: -1.0, right: 3 },
                leaf(0.0, 0.1),
                leaf(1.0, 0.2),
                leaf(0.5, 0.9),
            ],
        };
        Forest {
            params: ForestParams::default(),
            n_joints: 1,
            n_classes: 2,
            beta: Some(0.07),
            trees: vec![tree, Tree { nodes: vec![leaf(0.25, 0.5)] }],
        }
    }

    #[test]
    fn round_trip_restores_right_links() {
        let f = small_forest();
        let bytes = serialize(&f);
        assert_eq!(bytes.len() % 8, 0);
        assert_eq!(deserialize(&bytes).unwrap(), f);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = serialize(&small_forest());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(deserialize(&bytes), Err(ModelError::Checksum { .. })));
    }

    #[test]
    fn header_errors() {
        let bytes = serialize(&small_forest());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize(&bad), Err(ModelError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(deserialize(&v2), Err(ModelError::UnsupportedVersion(2))));
        assert!(matches!(deserialize(&bytes[..6]), Err(ModelError::Truncated)));
        assert!(matches!(deserialize(b"OA"), Err(ModelError::Truncated)));
    }

    #[test]
    fn truncation_with_valid_checksum_detected() {
        let bytes = serialize(&small_forest());
        let mut cut = bytes[..bytes.len() - 24].to_vec();
        let crc = CRC64.checksum(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(deserialize(&cut), Err(ModelError::Truncated)));
    }

    #[test]
    fn empty_tree_list_is_a_format_error() {
        let mut f = small_forest();
        f.trees.clear();
        assert!(matches!(deserialize(&serialize(&f)), Err(ModelError::Malformed(_))));
    }

    #[test]
    fn out_of_range_feature_rejected() {
        let mut f = small_forest();
        if let Node::Split { gamma, .. } = &mut f.trees[0].nodes[0] {
            *gamma = 9;
        }
        assert!(matches!(deserialize(&serialize(&f)), Err(ModelError::Malformed(_))));
    }

    #[test]
    fn incomplete_preorder_rejected() {
        let mut nodes = vec![Node::Split { gamma: 0, t: 0.0, right: 0 }, leaf(0.0, 0.0)];
        assert!(link_preorder(&mut nodes).is_err());
        let mut nodes = vec![leaf(0.0, 0.0), leaf(0.0, 0.0)];
        assert!(link_preorder(&mut nodes).is_err());
    }
}
