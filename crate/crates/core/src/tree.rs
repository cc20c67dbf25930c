//! Tree-structured training networks.
//!
//! A [`TreeSpec`] places instances of the base network's blocks in a rooted
//! tree: nodes at depth `d` are copies of block `d`, and every root-to-leaf
//! path is a complete network ending in its own classifier. Shared ancestors
//! are evaluated once per batch and receive gradient from all of their
//! descendant branches.
//!
//! Balanced trees (`balanced M H`) and branching vectors are shorthand for
//! the explicit form. The explicit form also admits several roots, which is
//! how fully independent peers (every block duplicated) are expressed.
//!
//! ```
//! use tsa::nn::NetworkSpec;
//! use tsa::tree::TreeSpec;
//!
//! let base = NetworkSpec::mlp(2, 8, 3, 3)?;
//! let tree = TreeSpec::balanced(base, 2, 3)?;
//! assert_eq!(tree.leaf_count(), 4);
//! assert_eq!(tree.node_count(), 7);
//! # Ok::<(), tsa::Error>(())
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::distill::softmax_temp;
use crate::nn::{block_forward, init_params, BlockParams, Network, NetworkSpec};
use crate::{Error, Result};

/// Nested child-list description of one rooted subtree.
///
/// Text form: a node is `(` followed by its children and `)`, so a leaf is
/// `()` and a three-block chain is `((()))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology(pub Vec<Topology>);

impl Topology {
    pub fn leaf() -> Self {
        Topology(Vec::new())
    }

    /// A single path of `depth` nodes.
    pub fn chain(depth: usize) -> Self {
        (1..depth).fold(Topology::leaf(), |t, _| Topology(vec![t]))
    }

    /// Parses a sequence of one or more subtrees (a forest).
    pub fn parse_forest(s: &str) -> Result<Vec<Topology>> {
        let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
        let mut pos = 0;
        let mut roots = Vec::new();
        while pos < chars.len() {
            roots.push(Self::parse_node(&chars, &mut pos)?);
        }
        if roots.is_empty() {
            return Err(Error::InvalidTree("empty explicit topology".into()));
        }
        Ok(roots)
    }

    fn parse_node(chars: &[char], pos: &mut usize) -> Result<Topology> {
        if chars.get(*pos) != Some(&'(') {
            return Err(Error::InvalidTree(format!(
                "expected `(` at position {}",
                *pos
            )));
        }
        *pos += 1;
        let mut children = Vec::new();
        loop {
            match chars.get(*pos) {
                Some(')') => {
                    *pos += 1;
                    return Ok(Topology(children));
                }
                Some('(') => children.push(Self::parse_node(chars, pos)?),
                Some(c) => {
                    return Err(Error::InvalidTree(format!(
                        "unexpected `{c}` at position {}",
                        *pos
                    )))
                }
                None => return Err(Error::InvalidTree("unbalanced parentheses".into())),
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        if self.0.is_empty() {
            1
        } else {
            self.0.iter().map(Topology::leaf_count).sum()
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for c in &self.0 {
            write!(f, "{c}")?;
        }
        f.write_str(")")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    /// 1-based; a node at depth `d` is an instance of block `d`.
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Root-to-leaf path: the root index followed by the child index taken at
/// each level. Always has one entry per block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BranchId(pub Vec<usize>);

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("."))
    }
}

/// Block-instance tree over a base network.
///
/// Nodes are stored in depth-first pre-order with children in ascending
/// index order; node indices double as parameter-stream ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeSpec {
    base: NetworkSpec,
    nodes: Vec<TreeNode>,
    roots: Vec<usize>,
}

impl TreeSpec {
    /// `TSA-M-H`: every internal node has `m` children, giving `m^(h-1)`
    /// branches.
    pub fn balanced(base: NetworkSpec, m: usize, h: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidTree("balanced tree needs M >= 1".into()));
        }
        if base.depth() != h {
            return Err(Error::InvalidTree(format!(
                "balanced tree of depth {h} over a network of {} blocks",
                base.depth()
            )));
        }
        let mut branching = vec![m; h];
        branching[0] = 1;
        Self::from_branching(base, &branching)
    }

    /// Every node at depth `d - 1` gets `branching[d - 1]` children;
    /// `branching[0]` must be 1 (single root).
    pub fn from_branching(base: NetworkSpec, branching: &[usize]) -> Result<Self> {
        if branching.len() != base.depth() {
            return Err(Error::InvalidTree(format!(
                "branching vector has {} entries for {} blocks",
                branching.len(),
                base.depth()
            )));
        }
        if branching[0] != 1 {
            return Err(Error::InvalidTree(format!(
                "branching vector must start with 1, got {}",
                branching[0]
            )));
        }
        if branching.contains(&0) {
            return Err(Error::InvalidTree("branching factors must be >= 1".into()));
        }
        let root = branching[1..]
            .iter()
            .rev()
            .fold(Topology::leaf(), |t, &b| Topology(vec![t; b]));
        Self::explicit(base, &[root])
    }

    /// Arbitrary topology, possibly with several roots. Every leaf must sit
    /// at depth `H`.
    pub fn explicit(base: NetworkSpec, roots: &[Topology]) -> Result<Self> {
        if roots.is_empty() {
            return Err(Error::InvalidTree("no root".into()));
        }
        let h = base.depth();
        let mut nodes = Vec::new();
        let mut root_ids = Vec::new();
        fn visit(
            t: &Topology,
            depth: usize,
            parent: Option<usize>,
            h: usize,
            nodes: &mut Vec<TreeNode>,
        ) -> Result<usize> {
            if depth > h {
                return Err(Error::InvalidTree(format!(
                    "node at depth {depth} exceeds network depth {h}"
                )));
            }
            if t.0.is_empty() && depth < h {
                return Err(Error::InvalidTree(format!(
                    "leaf at depth {depth} does not reach the classifier at depth {h}"
                )));
            }
            let id = nodes.len();
            nodes.push(TreeNode {
                depth,
                parent,
                children: Vec::new(),
            });
            for child in &t.0 {
                let c = visit(child, depth + 1, Some(id), h, nodes)?;
                nodes[id].children.push(c);
            }
            Ok(id)
        }
        for r in roots {
            root_ids.push(visit(r, 1, None, h, &mut nodes)?);
        }
        Ok(Self {
            base,
            nodes,
            roots: root_ids,
        })
    }

    pub fn base(&self) -> &NetworkSpec {
        &self.base
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Leaf node indices in canonical (depth-first) order.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].children.is_empty())
            .collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().len()
    }

    /// Training-time parameter count: every node counts its block once.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| self.base.blocks()[n.depth - 1].param_count())
            .sum()
    }

    pub fn topology(&self) -> Vec<Topology> {
        fn build(spec: &TreeSpec, id: usize) -> Topology {
            Topology(spec.nodes[id].children.iter().map(|&c| build(spec, c)).collect())
        }
        self.roots.iter().map(|&r| build(self, r)).collect()
    }

    /// Explicit text form of the topology, e.g. `((()())(()()))`.
    pub fn topology_string(&self) -> String {
        self.topology().iter().map(Topology::to_string).collect()
    }

    /// Branch ids in canonical leaf order.
    pub fn branches(&self) -> Vec<BranchId> {
        self.leaves().into_iter().map(|l| self.branch_of(l)).collect()
    }

    fn branch_of(&self, leaf: usize) -> BranchId {
        let mut path = Vec::with_capacity(self.base.depth());
        let mut node = leaf;
        while let Some(p) = self.nodes[node].parent {
            let idx = self.nodes[p].children.iter().position(|&c| c == node);
            path.push(idx.expect("child listed under its parent"));
            node = p;
        }
        path.push(self.roots.iter().position(|&r| r == node).expect("root"));
        path.reverse();
        BranchId(path)
    }

    /// Records a forward pass with parameters already bound on `g`, one
    /// node list per tree node in the layout of [`BlockParams::tensors`].
    pub fn forward_bound(&self, g: &mut Graph, input: NodeId, bound: Vec<Vec<NodeId>>) -> Result<TreeForward> {
        if bound.len() != self.nodes.len() {
            return Err(Error::InvalidTree(format!(
                "{} bound parameter sets for {} nodes",
                bound.len(),
                self.nodes.len()
            )));
        }
        let mut outputs: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        for (node, ids) in self.nodes.iter().zip(&bound) {
            let x = node.parent.map_or(input, |p| outputs[p]);
            outputs.push(block_forward(g, &self.base.blocks()[node.depth - 1], ids, x)?);
        }
        Ok(TreeForward {
            params: bound,
            leaf_logits: self.leaves().into_iter().map(|l| outputs[l]).collect(),
        })
    }

    /// Node indices along `branch`, root first.
    pub fn path_nodes(&self, branch: &BranchId) -> Result<Vec<usize>> {
        let invalid = || Error::InvalidBranch(branch.0.clone());
        let (&root, rest) = branch.0.split_first().ok_or_else(invalid)?;
        if branch.0.len() != self.base.depth() {
            return Err(invalid());
        }
        let mut node = *self.roots.get(root).ok_or_else(invalid)?;
        let mut out = vec![node];
        for &c in rest {
            node = *self.nodes[node].children.get(c).ok_or_else(invalid)?;
            out.push(node);
        }
        Ok(out)
    }
}

/// Topologies compared by the experiment harness, all built over the same
/// base network. With three blocks the multi-branch methods each have four
/// branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The unmodified network.
    Baseline,
    /// Balanced binary tree, `TSA-2-H`.
    Tsa,
    /// Only the last block duplicated, `(1, .., 1, K)`.
    OneStyle,
    /// `K` fully independent networks.
    FullDup,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Tsa, Method::OneStyle, Method::FullDup];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Tsa => "tsa",
            Method::OneStyle => "one_style",
            Method::FullDup => "full_dup",
        }
    }

    pub fn build(self, base: &NetworkSpec) -> Result<TreeSpec> {
        let h = base.depth();
        let k = 1usize << (h - 1);
        match self {
            Method::Baseline => TreeSpec::from_branching(base.clone(), &vec![1; h]),
            Method::Tsa => TreeSpec::balanced(base.clone(), 2, h),
            Method::OneStyle => {
                let mut b = vec![1; h];
                b[h - 1] = k;
                TreeSpec::from_branching(base.clone(), &b)
            }
            Method::FullDup => TreeSpec::explicit(base.clone(), &vec![Topology::chain(h); k]),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// How [`TreeNetwork::ensemble_predict`] combines branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Mean of the per-branch softmax distributions.
    #[default]
    Probabilities,
    /// Softmax of the mean logits.
    Logits,
}

impl EnsembleMode {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleMode::Probabilities => "probs",
            EnsembleMode::Logits => "logits",
        }
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probs" | "probabilities" => Ok(EnsembleMode::Probabilities),
            "logits" => Ok(EnsembleMode::Logits),
            _ => Err(Error::InvalidConfig(format!("unknown ensemble mode `{s}` (probs|logits)"))),
        }
    }
}

/// Mean over branches of `softmax(logits)` (or softmax of the mean logits).
pub fn ensemble_from_logits(leaf_logits: &[Tensor], mode: EnsembleMode) -> Result<Tensor> {
    let first = leaf_logits
        .first()
        .ok_or_else(|| Error::InvalidTree("ensemble over zero branches".into()))?;
    let k = leaf_logits.len() as f64;
    let mean = |ts: &[Tensor]| -> Result<Tensor> {
        let mut acc = Tensor::zeros(first.shape());
        for t in ts {
            if t.shape() != first.shape() {
                return Err(Error::shape("ensemble", "branch outputs differ in shape"));
            }
            acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, v)| *a += v);
        }
        acc.data_mut().iter_mut().for_each(|a| *a /= k);
        Ok(acc)
    };
    match mode {
        EnsembleMode::Probabilities => {
            let probs = leaf_logits
                .iter()
                .map(|z| softmax_temp(z, 1.0))
                .collect::<Result<Vec<_>>>()?;
            mean(&probs)
        }
        EnsembleMode::Logits => softmax_temp(&mean(leaf_logits)?, 1.0),
    }
}

/// Node outputs of one tree forward pass recorded on a graph.
#[derive(Debug)]
pub struct TreeForward {
    /// Bound parameter nodes, per tree node.
    pub params: Vec<Vec<NodeId>>,
    /// Leaf logits in canonical leaf order.
    pub leaf_logits: Vec<NodeId>,
}

/// An instantiated [`TreeSpec`]: one parameter set per tree node.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeNetwork {
    spec: TreeSpec,
    params: Vec<BlockParams>,
}

impl TreeNetwork {
    /// Node `i` is initialized with `init_params(block, seed, i)`.
    pub fn instantiate(spec: TreeSpec, seed: u64) -> Self {
        let params = spec
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| init_params(&spec.base.blocks()[n.depth - 1], seed, i as u32))
            .collect();
        Self { spec, params }
    }

    pub fn from_parts(spec: TreeSpec, params: Vec<BlockParams>) -> Result<Self> {
        if params.len() != spec.node_count() {
            return Err(Error::InvalidTree(format!(
                "{} parameter sets for {} nodes",
                params.len(),
                spec.node_count()
            )));
        }
        for (n, p) in spec.nodes.iter().zip(&params) {
            BlockParams::new(&spec.base.blocks()[n.depth - 1], p.tensors().to_vec())?;
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &TreeSpec {
        &self.spec
    }

    pub fn params(&self) -> &[BlockParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [BlockParams] {
        &mut self.params
    }

    pub fn leaf_count(&self) -> usize {
        self.spec.leaf_count()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(BlockParams::param_count).sum()
    }

    /// Records the forward pass on `g`. Each node is evaluated once and its
    /// output feeds all of its children. Parameters are bound as
    /// differentiable leaves when `trainable`, as constants otherwise.
    pub fn forward(&self, g: &mut Graph, input: NodeId, trainable: bool) -> Result<TreeForward> {
        let bound = self
            .params
            .iter()
            .map(|p| if trainable { p.bind(g) } else { p.bind_constant(g) })
            .collect();
        self.spec.forward_bound(g, input, bound)
    }

    /// Per-leaf logits `(batch, classes)` in canonical leaf order.
    pub fn leaf_logits(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let expected = self.spec.base.input_shape();
        if batch.shape().get(1..) != Some(expected) {
            return Err(Error::shape(
                "tree_forward",
                format!("batch {:?} does not match input shape {expected:?}", batch.shape()),
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let fwd = self.forward(&mut g, x, false)?;
        Ok(fwd.leaf_logits.iter().map(|&id| g.value(id).clone()).collect())
    }

    /// Extracts one branch as a standalone network with the base
    /// architecture.
    pub fn prune_to_branch(&self, branch: &BranchId) -> Result<Network> {
        let nodes = self.spec.path_nodes(branch)?;
        Network::from_parts(
            self.spec.base.clone(),
            nodes.iter().map(|&n| self.params[n].clone()).collect(),
        )
    }

    pub fn ensemble_predict(&self, batch: &Tensor, mode: EnsembleMode) -> Result<Tensor> {
        ensemble_from_logits(&self.leaf_logits(batch)?, mode)
    }
}
