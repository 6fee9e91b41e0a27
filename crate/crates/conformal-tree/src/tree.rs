//! Robust dyadic regression trees.
//!
//! Nodes are addressed as `(depth, position)` pairs: the root is `(0, 0)` and
//! the children of `(l, k)` are `(l+1, 2k)` and `(l+1, 2k+1)`. Every split is
//! axis-aligned and lands at the dyadic midpoint of the node's current extent
//! along the chosen dimension, so all cell boundaries are dyadic rationals and
//! are represented exactly as `(offset, depth)` pairs.
//!
//! Growing is greedy: among all leaves that admit a split (both children keep
//! at least `m` points and the range-reduction rate clears `eta`), split the
//! one whose best direction most reduces the score spread
//! `range(parent) - (range(left) + range(right)) / 2`, until the leaf budget
//! `K` is reached or no candidate remains. Targeting the *range* rather than
//! deviance is what makes the fit stable under the addition of one more
//! observation: a new point changes a node's range only when it is a strict
//! extreme within its leaf.
//!
//! [`fit_robust_tree_with_test_point`] is the query-aware variant: the test
//! point counts toward the per-child minimum but never contributes to any
//! range, as if it carried a score pinned to the centre of its leaf's range.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on node depth so positions and interval offsets stay in `u64`.
/// Unreachable for any practical leaf budget; splits beyond it are refused.
pub const MAX_NODE_DEPTH: u32 = 60;

/// Largest accepted `max_depth_per_dimension`: offsets stay exactly
/// representable in `f64` well below this.
pub const MAX_DEPTH_PER_DIMENSION: u32 = 40;

// ---------------------------------------------------------------------------
// Node addressing
// ---------------------------------------------------------------------------

/// Address of a tree node: depth `l` and horizontal position `k < 2^l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    /// Depth `l`; the root sits at depth 0.
    pub depth: u32,
    /// Horizontal position `k` within the level, `0 <= k < 2^l`.
    pub pos: u64,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { depth: 0, pos: 0 };

    pub fn left(self) -> NodeId {
        NodeId {
            depth: self.depth + 1,
            pos: self.pos * 2,
        }
    }

    pub fn right(self) -> NodeId {
        NodeId {
            depth: self.depth + 1,
            pos: self.pos * 2 + 1,
        }
    }

    pub fn parent(self) -> Option<NodeId> {
        if self.depth == 0 {
            None
        } else {
            Some(NodeId {
                depth: self.depth - 1,
                pos: self.pos / 2,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Dyadic geometry
// ---------------------------------------------------------------------------

/// One side of a box: the dyadic interval `[offset/2^depth, (offset+1)/2^depth)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DyadicInterval {
    pub offset: u64,
    pub depth: u32,
}

impl DyadicInterval {
    /// The whole unit interval `[0, 1]`.
    pub const UNIT: DyadicInterval = DyadicInterval { offset: 0, depth: 0 };

    pub fn lower(self) -> f64 {
        // Exact: offset < 2^depth <= 2^MAX_DEPTH_PER_DIMENSION << 2^53.
        self.offset as f64 * 0.5f64.powi(self.depth as i32)
    }

    pub fn upper(self) -> f64 {
        (self.offset + 1) as f64 * 0.5f64.powi(self.depth as i32)
    }

    pub fn midpoint(self) -> f64 {
        (2 * self.offset + 1) as f64 * 0.5f64.powi(self.depth as i32 + 1)
    }

    /// True when this interval touches the upper face of the domain.
    pub fn at_domain_top(self) -> bool {
        self.offset + 1 == 1u64 << self.depth
    }

    /// Halves: `[lower, mid)` and `[mid, upper)`.
    pub fn split(self) -> (DyadicInterval, DyadicInterval) {
        (
            DyadicInterval {
                offset: 2 * self.offset,
                depth: self.depth + 1,
            },
            DyadicInterval {
                offset: 2 * self.offset + 1,
                depth: self.depth + 1,
            },
        )
    }

    /// Half-open membership, closed at the domain's upper face so that
    /// `[0, 1]` is fully covered.
    pub fn contains(self, x: f64) -> bool {
        x >= self.lower() && (x < self.upper() || (self.at_domain_top() && x <= 1.0))
    }
}

/// Axis-aligned rectangular cell of `[0, 1]^d` with dyadic sides.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DyadicBox {
    sides: Vec<DyadicInterval>,
}

impl DyadicBox {
    /// The unit cube `[0, 1]^d`.
    pub fn unit(dim: usize) -> DyadicBox {
        DyadicBox {
            sides: vec![DyadicInterval::UNIT; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.sides.len()
    }

    pub fn side(&self, j: usize) -> DyadicInterval {
        self.sides[j]
    }

    pub fn lower(&self, j: usize) -> f64 {
        self.sides[j].lower()
    }

    pub fn upper(&self, j: usize) -> f64 {
        self.sides[j].upper()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.sides.len() && self.sides.iter().zip(x).all(|(s, &v)| s.contains(v))
    }

    /// Halves along dimension `j` at the side's dyadic midpoint.
    pub fn split(&self, j: usize) -> (DyadicBox, DyadicBox) {
        let (lo, hi) = self.sides[j].split();
        let mut left = self.clone();
        let mut right = self.clone();
        left.sides[j] = lo;
        right.sides[j] = hi;
        (left, right)
    }
}

// ---------------------------------------------------------------------------
// Configuration and samples
// ---------------------------------------------------------------------------

/// Hyperparameters of the robust tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// Minimum number of samples each child must keep (`m`, at least 3).
    pub min_samples_per_leaf: usize,
    /// Leaf budget `K`.
    pub max_leaves: usize,
    /// Minimum range-reduction rate `eta` for a direction to be eligible.
    pub min_range_reduction_rate: f64,
    /// Safety bound on how many times any one dimension may be halved.
    pub max_depth_per_dimension: u32,
}

impl TreeConfig {
    /// Config with the given leaf minimum and budget; `eta = 0.05` and a
    /// per-dimension depth cap of 20.
    pub fn new(min_samples_per_leaf: usize, max_leaves: usize) -> TreeConfig {
        TreeConfig {
            min_samples_per_leaf,
            max_leaves,
            min_range_reduction_rate: 0.05,
            max_depth_per_dimension: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_samples_per_leaf < 3 {
            return Err(Error::InvalidConfig(format!(
                "min_samples_per_leaf = {} but the leaf quantile index needs at least 3",
                self.min_samples_per_leaf
            )));
        }
        if self.max_leaves < 1 {
            return Err(Error::InvalidConfig("max_leaves must be at least 1".into()));
        }
        if !(self.min_range_reduction_rate > 0.0 && self.min_range_reduction_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "min_range_reduction_rate = {} must lie in (0, 1)",
                self.min_range_reduction_rate
            )));
        }
        if self.max_depth_per_dimension == 0 || self.max_depth_per_dimension > MAX_DEPTH_PER_DIMENSION
        {
            return Err(Error::InvalidConfig(format!(
                "max_depth_per_dimension = {} must lie in [1, {}]",
                self.max_depth_per_dimension, MAX_DEPTH_PER_DIMENSION
            )));
        }
        Ok(())
    }
}

/// A covariate vector in `[0, 1]^d` paired with its conformity score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub x: Vec<f64>,
    pub score: f64,
}

impl ScoredSample {
    pub fn new(x: Vec<f64>, score: f64) -> Result<ScoredSample> {
        for (index, &value) in x.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfDomain { index, value });
            }
        }
        if !score.is_finite() {
            return Err(Error::InvalidConfig(format!("non-finite score {score}")));
        }
        Ok(ScoredSample { x, score })
    }
}

/// Max minus min of a nonempty score list.
pub fn node_range(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyNode);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &s in scores {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    Ok(hi - lo)
}

// ---------------------------------------------------------------------------
// The tree
// ---------------------------------------------------------------------------

/// An immutable fitted dyadic tree: node set, split directions on internal
/// nodes, and the leaf boxes they induce.
#[derive(Debug, Clone)]
pub struct DyadicTree {
    dim: usize,
    config: TreeConfig,
    /// `None` marks a leaf; `Some(j)` an internal node split along `j`.
    nodes: BTreeMap<NodeId, Option<usize>>,
    leaf_boxes: BTreeMap<NodeId, DyadicBox>,
    /// Range reduction recorded for each internal node at the moment it split.
    split_gains: BTreeMap<NodeId, f64>,
}

impl DyadicTree {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_boxes.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains_node(&self, node: NodeId) -> bool {
        self.nodes.contains_key(&node)
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        matches!(self.nodes.get(&node), Some(None))
    }

    /// Split direction of an internal node.
    pub fn split_direction(&self, node: NodeId) -> Option<usize> {
        self.nodes.get(&node).copied().flatten()
    }

    /// Range reduction recorded when `node` was split.
    pub fn split_gain(&self, node: NodeId) -> Option<f64> {
        self.split_gains.get(&node).copied()
    }

    /// Leaf ids in `(depth, pos)` order.
    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.leaf_boxes.keys().copied()
    }

    /// The partition induced by the leaves, in `(depth, pos)` order.
    pub fn partition(&self) -> impl Iterator<Item = (NodeId, &DyadicBox)> + '_ {
        self.leaf_boxes.iter().map(|(id, b)| (*id, b))
    }

    /// Box of any node in the tree, rebuilt from the root-to-node path.
    pub fn box_of(&self, node: NodeId) -> Result<DyadicBox> {
        if !self.contains_node(node) {
            return Err(Error::UnknownNode {
                depth: node.depth,
                pos: node.pos,
            });
        }
        let mut cell = DyadicBox::unit(self.dim);
        let mut cursor = NodeId::ROOT;
        for level in (0..node.depth).rev() {
            let dim = self.split_direction(cursor).ok_or(Error::UnknownNode {
                depth: cursor.depth,
                pos: cursor.pos,
            })?;
            let go_right = (node.pos >> level) & 1 == 1;
            let (left, right) = cell.split(dim);
            cell = if go_right { right } else { left };
            cursor = if go_right {
                cursor.right()
            } else {
                cursor.left()
            };
        }
        Ok(cell)
    }

    /// The unique leaf whose box contains `x`, found by descending from the
    /// root and comparing `x` against each split's dyadic midpoint.
    pub fn leaf_of(&self, x: &[f64]) -> Result<NodeId> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        for (index, &value) in x.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfDomain { index, value });
            }
        }
        let mut node = NodeId::ROOT;
        let mut cell = DyadicBox::unit(self.dim);
        while let Some(dim) = self.split_direction(node) {
            let mid = cell.side(dim).midpoint();
            let (left, right) = cell.split(dim);
            if x[dim] < mid {
                node = node.left();
                cell = left;
            } else {
                node = node.right();
                cell = right;
            }
        }
        Ok(node)
    }

    /// Indices of the samples falling in `node`'s box.
    pub fn samples_in(&self, node: NodeId, samples: &[ScoredSample]) -> Result<Vec<usize>> {
        let cell = self.box_of(node)?;
        Ok(samples
            .iter()
            .enumerate()
            .filter(|(_, s)| cell.contains(&s.x))
            .map(|(i, _)| i)
            .collect())
    }

    /// Range reduction for splitting `node` along `dim` at the dyadic
    /// midpoint: `range(parent) - (range(left) + range(right)) / 2`.
    /// Fails with [`Error::IneligibleDirection`] when a child holds no sample.
    pub fn range_reduction(
        &self,
        node: NodeId,
        dim: usize,
        samples: &[ScoredSample],
    ) -> Result<f64> {
        if dim >= self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: dim,
            });
        }
        let cell = self.box_of(node)?;
        let mid = cell.side(dim).midpoint();
        let mut parent = Extremes::new();
        let mut left = Extremes::new();
        let mut right = Extremes::new();
        for s in samples.iter().filter(|s| cell.contains(&s.x)) {
            parent.push(s.score);
            if s.x[dim] < mid {
                left.push(s.score);
            } else {
                right.push(s.score);
            }
        }
        if parent.count == 0 {
            return Err(Error::EmptyNode);
        }
        if left.count == 0 || right.count == 0 {
            return Err(Error::IneligibleDirection { dim });
        }
        Ok(parent.range() - (left.range() + right.range()) / 2.0)
    }

    /// Eligible split directions for a leaf: both children keep at least `m`
    /// samples, the range-reduction rate clears `eta`, and the per-dimension
    /// depth cap is respected. A leaf with zero score range has none.
    pub fn eligible_directions(
        &self,
        node: NodeId,
        samples: &[ScoredSample],
    ) -> Result<Vec<usize>> {
        if !self.is_leaf(node) {
            return Err(Error::UnknownNode {
                depth: node.depth,
                pos: node.pos,
            });
        }
        let cell = self.box_of(node)?;
        let idx = self.samples_in(node, samples)?;
        let mut eligible = Vec::new();
        for dim in 0..self.dim {
            if let Some(cand) =
                evaluate_direction(&cell, dim, &idx, samples, None, &self.config, node.depth)
            {
                eligible.push(cand.dim);
            }
        }
        Ok(eligible)
    }

    /// True when both trees induce the same partition, compared as sets of
    /// leaf boxes (split order along the way does not matter).
    pub fn partitions_equal(&self, other: &DyadicTree) -> Result<bool> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let a: BTreeSet<&DyadicBox> = self.leaf_boxes.values().collect();
        let b: BTreeSet<&DyadicBox> = other.leaf_boxes.values().collect();
        Ok(a == b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TreeJson::from(self))?)
    }

    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(TreeJson::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<DyadicTree> {
        let parsed: TreeJson = serde_json::from_str(text)?;
        parsed.build()
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<DyadicTree> {
        let parsed: TreeJson = serde_json::from_value(value)?;
        parsed.build()
    }
}

// ---------------------------------------------------------------------------
// JSON form: boxes are rebuilt from node structure, never stored.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NodeJson {
    l: u32,
    k: u64,
    split_dim: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct TreeJson {
    version: String,
    d: usize,
    config: TreeConfig,
    nodes: Vec<NodeJson>,
}

impl From<&DyadicTree> for TreeJson {
    fn from(tree: &DyadicTree) -> TreeJson {
        TreeJson {
            version: "1".into(),
            d: tree.dim,
            config: tree.config.clone(),
            nodes: tree
                .nodes
                .iter()
                .map(|(id, dir)| NodeJson {
                    l: id.depth,
                    k: id.pos,
                    split_dim: *dir,
                })
                .collect(),
        }
    }
}

impl TreeJson {
    fn build(self) -> Result<DyadicTree> {
        if self.version != "1" {
            return Err(Error::Schema(format!(
                "unsupported tree version '{}'",
                self.version
            )));
        }
        self.config.validate()?;
        if self.d == 0 {
            return Err(Error::Schema("tree dimension must be positive".into()));
        }
        let mut nodes = BTreeMap::new();
        for n in &self.nodes {
            if n.l > MAX_NODE_DEPTH || (n.l < 64 && n.k >= 1u64 << n.l) {
                return Err(Error::Schema(format!("node ({}, {}) out of range", n.l, n.k)));
            }
            if let Some(dim) = n.split_dim {
                if dim >= self.d {
                    return Err(Error::Schema(format!(
                        "split_dim {} out of range for d = {}",
                        dim, self.d
                    )));
                }
            }
            let id = NodeId {
                depth: n.l,
                pos: n.k,
            };
            if nodes.insert(id, n.split_dim).is_some() {
                return Err(Error::Schema(format!("duplicate node ({}, {})", n.l, n.k)));
            }
        }
        if !nodes.contains_key(&NodeId::ROOT) {
            return Err(Error::Schema("missing root node".into()));
        }
        // Children come in pairs exactly below split nodes, and ancestors are
        // all present.
        for (&id, &dir) in &nodes {
            if let Some(parent) = id.parent() {
                match nodes.get(&parent) {
                    Some(Some(_)) => {}
                    _ => {
                        return Err(Error::Schema(format!(
                            "node ({}, {}) lacks a split parent",
                            id.depth, id.pos
                        )))
                    }
                }
            }
            let has_children = nodes.contains_key(&id.left()) || nodes.contains_key(&id.right());
            match dir {
                Some(_) => {
                    if !(nodes.contains_key(&id.left()) && nodes.contains_key(&id.right())) {
                        return Err(Error::Schema(format!(
                            "split node ({}, {}) is missing a child",
                            id.depth, id.pos
                        )));
                    }
                }
                None => {
                    if has_children {
                        return Err(Error::Schema(format!(
                            "leaf ({}, {}) has children",
                            id.depth, id.pos
                        )));
                    }
                }
            }
        }
        let mut tree = DyadicTree {
            dim: self.d,
            config: self.config,
            nodes,
            leaf_boxes: BTreeMap::new(),
            split_gains: BTreeMap::new(),
        };
        let leaves: Vec<NodeId> = tree
            .nodes
            .iter()
            .filter(|(_, d)| d.is_none())
            .map(|(id, _)| *id)
            .collect();
        for id in leaves {
            let cell = tree.box_of(id)?;
            tree.leaf_boxes.insert(id, cell);
        }
        Ok(tree)
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

struct Extremes {
    count: usize,
    min: f64,
    max: f64,
}

impl Extremes {
    fn new() -> Extremes {
        Extremes {
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, s: f64) {
        self.count += 1;
        self.min = self.min.min(s);
        self.max = self.max.max(s);
    }

    fn range(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    dim: usize,
    reduction: f64,
}

/// Evaluate one direction of one leaf against the candidacy conditions.
/// `test_x` participates in the child counts only, never in any range.
fn evaluate_direction(
    cell: &DyadicBox,
    dim: usize,
    idx: &[usize],
    samples: &[ScoredSample],
    test_x: Option<&[f64]>,
    config: &TreeConfig,
    node_depth: u32,
) -> Option<Candidate> {
    if node_depth >= MAX_NODE_DEPTH {
        return None;
    }
    let side = cell.side(dim);
    if side.depth >= config.max_depth_per_dimension {
        return None;
    }
    let mid = side.midpoint();
    let mut parent = Extremes::new();
    let mut left = Extremes::new();
    let mut right = Extremes::new();
    for &i in idx {
        let s = &samples[i];
        parent.push(s.score);
        if s.x[dim] < mid {
            left.push(s.score);
        } else {
            right.push(s.score);
        }
    }
    let (mut left_total, mut right_total) = (left.count, right.count);
    if let Some(tx) = test_x {
        if tx[dim] < mid {
            left_total += 1;
        } else {
            right_total += 1;
        }
    }
    let m = config.min_samples_per_leaf;
    if left_total < m || right_total < m || left.count == 0 || right.count == 0 {
        return None;
    }
    let parent_range = parent.range();
    if parent_range <= 0.0 {
        return None;
    }
    let reduction = parent_range - (left.range() + right.range()) / 2.0;
    if reduction / parent_range >= config.min_range_reduction_rate {
        Some(Candidate { dim, reduction })
    } else {
        None
    }
}

struct LeafState {
    cell: DyadicBox,
    idx: Vec<usize>,
    has_test: bool,
    best: Option<Candidate>,
}

fn best_candidate(
    cell: &DyadicBox,
    idx: &[usize],
    samples: &[ScoredSample],
    test_x: Option<&[f64]>,
    allowed_dims: &[usize],
    config: &TreeConfig,
    node_depth: u32,
) -> Option<Candidate> {
    let mut best: Option<Candidate> = None;
    for &dim in allowed_dims {
        if let Some(c) = evaluate_direction(cell, dim, idx, samples, test_x, config, node_depth) {
            // Strict '>' keeps the smallest dimension on ties.
            if best.is_none_or(|b| c.reduction > b.reduction) {
                best = Some(c);
            }
        }
    }
    best
}

fn fit_core(
    samples: &[ScoredSample],
    config: &TreeConfig,
    test_x: Option<&[f64]>,
    allowed_dims: Option<&[usize]>,
) -> Result<DyadicTree> {
    config.validate()?;
    if samples.len() < config.min_samples_per_leaf {
        return Err(Error::InsufficientData {
            needed: config.min_samples_per_leaf,
            have: samples.len(),
        });
    }
    let dim = samples[0].x.len();
    if dim == 0 {
        return Err(Error::InvalidConfig("samples have zero dimensions".into()));
    }
    for s in samples {
        if s.x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.x.len(),
            });
        }
    }
    if let Some(tx) = test_x {
        if tx.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: tx.len(),
            });
        }
        for (index, &value) in tx.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfDomain { index, value });
            }
        }
    }
    let all_dims: Vec<usize>;
    let dims: &[usize] = match allowed_dims {
        Some(d) => {
            if d.is_empty() {
                return Err(Error::InvalidConfig("no eligible dimensions".into()));
            }
            if let Some(&bad) = d.iter().find(|&&j| j >= dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: bad,
                });
            }
            d
        }
        None => {
            all_dims = (0..dim).collect();
            &all_dims
        }
    };

    let mut nodes: BTreeMap<NodeId, Option<usize>> = BTreeMap::new();
    nodes.insert(NodeId::ROOT, None);
    let mut split_gains = BTreeMap::new();

    let root_cell = DyadicBox::unit(dim);
    let root_idx: Vec<usize> = (0..samples.len()).collect();
    let root_best = best_candidate(&root_cell, &root_idx, samples, test_x, dims, config, 0);
    let mut leaves: BTreeMap<NodeId, LeafState> = BTreeMap::new();
    leaves.insert(
        NodeId::ROOT,
        LeafState {
            cell: root_cell,
            idx: root_idx,
            has_test: test_x.is_some(),
            best: root_best,
        },
    );

    while leaves.len() < config.max_leaves {
        // Largest reduction wins; BTreeMap order breaks ties toward the
        // smallest (depth, pos), and per-leaf scans toward the smallest dim.
        let chosen = leaves
            .iter()
            .filter_map(|(id, st)| st.best.map(|c| (*id, c)))
            .fold(None::<(NodeId, Candidate)>, |acc, (id, c)| match acc {
                Some((_, best)) if best.reduction >= c.reduction => acc,
                _ => Some((id, c)),
            });
        let Some((node, cand)) = chosen else { break };

        let state = leaves.remove(&node).expect("candidate leaf present");
        let (left_cell, right_cell) = state.cell.split(cand.dim);
        let mid = state.cell.side(cand.dim).midpoint();
        let mut left_idx = Vec::new();
        let mut right_idx = Vec::new();
        for &i in &state.idx {
            if samples[i].x[cand.dim] < mid {
                left_idx.push(i);
            } else {
                right_idx.push(i);
            }
        }
        let test_left = state.has_test && test_x.is_some_and(|tx| tx[cand.dim] < mid);
        let test_right = state.has_test && !test_left;

        nodes.insert(node, Some(cand.dim));
        split_gains.insert(node, cand.reduction);
        for (child, cell, idx, has_test) in [
            (node.left(), left_cell, left_idx, test_left),
            (node.right(), right_cell, right_idx, test_right),
        ] {
            nodes.insert(child, None);
            let best = best_candidate(
                &cell,
                &idx,
                samples,
                if has_test { test_x } else { None },
                dims,
                config,
                child.depth,
            );
            leaves.insert(
                child,
                LeafState {
                    cell,
                    idx,
                    has_test,
                    best,
                },
            );
        }
    }

    let leaf_boxes = leaves.into_iter().map(|(id, st)| (id, st.cell)).collect();
    Ok(DyadicTree {
        dim,
        config: config.clone(),
        nodes,
        leaf_boxes,
        split_gains,
    })
}

/// Fit a robust dyadic regression tree to scored samples by greedy
/// range-reduction splitting. Deterministic: ties break toward the smallest
/// `(depth, pos)` and then the smallest dimension.
pub fn fit_robust_tree(samples: &[ScoredSample], config: &TreeConfig) -> Result<DyadicTree> {
    fit_core(samples, config, None, None)
}

/// [`fit_robust_tree`] restricted to splitting along `allowed_dims`.
pub fn fit_robust_tree_on_dims(
    samples: &[ScoredSample],
    config: &TreeConfig,
    allowed_dims: &[usize],
) -> Result<DyadicTree> {
    fit_core(samples, config, None, Some(allowed_dims))
}

/// Query-aware fit: `x_test` counts toward the minimum-samples condition in
/// every node containing it but never contributes to a range, so the recorded
/// reductions equal those computed from the calibration scores alone.
pub fn fit_robust_tree_with_test_point(
    samples: &[ScoredSample],
    x_test: &[f64],
    config: &TreeConfig,
) -> Result<DyadicTree> {
    fit_core(samples, config, Some(x_test), None)
}

// ---------------------------------------------------------------------------
// Piecewise-constant regression on the partition
// ---------------------------------------------------------------------------

/// A fitted tree with one jump coefficient per leaf, set to the midrange
/// `(max + min) / 2` of the responses in the leaf. The midrange keeps every
/// in-sample residual within half the leaf's response range.
#[derive(Debug, Clone)]
pub struct TreeRegressor {
    tree: DyadicTree,
    leaf_values: BTreeMap<NodeId, f64>,
}

impl TreeRegressor {
    pub fn tree(&self) -> &DyadicTree {
        &self.tree
    }

    pub fn leaf_value(&self, leaf: NodeId) -> Option<f64> {
        self.leaf_values.get(&leaf).copied()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let leaf = self.tree.leaf_of(x)?;
        Ok(self.leaf_values[&leaf])
    }
}

/// Fit the robust tree directly to `(x, y)` pairs and attach per-leaf
/// midrange predictions.
pub fn fit_tree_regressor(
    x: &[Vec<f64>],
    y: &[f64],
    config: &TreeConfig,
) -> Result<TreeRegressor> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let samples: Vec<ScoredSample> = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| ScoredSample::new(xi.clone(), yi))
        .collect::<Result<_>>()?;
    let tree = fit_robust_tree(&samples, config)?;
    let mut leaf_values = BTreeMap::new();
    for (leaf, cell) in tree.partition() {
        let mut ext = Extremes::new();
        for s in samples.iter().filter(|s| cell.contains(&s.x)) {
            ext.push(s.score);
        }
        if ext.count == 0 {
            return Err(Error::EmptyNode);
        }
        leaf_values.insert(leaf, (ext.min + ext.max) / 2.0);
    }
    Ok(TreeRegressor { tree, leaf_values })
}
