//! The dynamic tree of Gaussian components.
//!
//! Nodes live in an arena kept in depth-first preorder (`nodes[0]` is the
//! root); every structural operation re-canonicalizes the arena so node
//! indices, [`PathId`]s and the full-path enumeration order are stable
//! functions of the tree's shape. Children keep their stick-breaking order.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::digamma;

/// A root-prefixed sequence of 1-based child indices. `[1]` is the root,
/// `[1, 2]` its second child. Length `L` addresses a leaf (full path),
/// anything shorter an internal node (inner path).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PathId(pub Vec<usize>);

impl PathId {
    pub fn root() -> Self {
        PathId(vec![1])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join("."))
    }
}

impl std::str::FromStr for PathId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split('.')
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad path id {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.first() != Some(&1) || parts.contains(&0) {
            return Err(Error::invalid(format!("bad path id {s:?}")));
        }
        Ok(PathId(parts))
    }
}

/// Gaussian component and Beta stick posterior of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

impl NodeParams {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>, a: f64, b: f64) -> Result<Self> {
        let p = NodeParams { mu, sigma2, a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.sigma2.len() {
            return Err(Error::DimensionMismatch {
                context: "node mean/variance",
                expected: self.mu.len(),
                actual: self.sigma2.len(),
            });
        }
        if !self.sigma2.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("node variance must be positive and finite"));
        }
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::invalid(format!(
                "Beta parameters must be positive, got ({}, {})",
                self.a, self.b
            )));
        }
        if !self.mu.iter().all(|m| m.is_finite()) {
            return Err(Error::invalid("node mean must be finite"));
        }
        Ok(())
    }

    /// E_q[log v] under Beta(a, b).
    pub fn expected_log_v(&self) -> f64 {
        digamma(self.a) - digamma(self.a + self.b)
    }

    /// E_q[log(1 - v)] under Beta(a, b).
    pub fn expected_log_one_minus_v(&self) -> f64 {
        digamma(self.b) - digamma(self.a + self.b)
    }
}

/// Adam moments for a node's unconstrained parameters
/// `[μ (J), log σ² (J), log a, log b]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMoments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub params: NodeParams,
    pub moments: NodeMoments,
    parent: Option<usize>,
    children: Vec<usize>,
    level: usize,
}

impl TreeNode {
    pub fn parent(&self) -> Option<usize> {
        self.parent
    }

    pub fn children(&self) -> &[usize] {
        &self.children
    }

    /// 1-based level; the root is level 1.
    pub fn level(&self) -> usize {
        self.level
    }
}

/// Tree-structured hierarchy of depth `L` with nCRP concentration `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    depth: usize,
    gamma: f64,
    nodes: Vec<TreeNode>,
}

impl Hierarchy {
    /// A single path of `depth` nodes: root N(0, I), each deeper node mean 0
    /// with variance halved per level, sticks at the prior Beta(1, γ).
    pub fn chain(depth: usize, latent_dim: usize, gamma: f64) -> Result<Self> {
        if depth == 0 || latent_dim == 0 {
            return Err(Error::invalid("depth and latent dimension must be positive"));
        }
        if !(gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        let params = (0..depth)
            .map(|l| {
                NodeParams::new(
                    vec![0.0; latent_dim],
                    vec![0.5f64.powi(l as i32); latent_dim],
                    1.0,
                    gamma,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_chain(params, gamma)
    }

    /// A single path with explicit node parameters, root first.
    pub fn from_chain(params: Vec<NodeParams>, gamma: f64) -> Result<Self> {
        let depth = params.len();
        let mut tree = Hierarchy::with_root(depth, gamma, params[0].clone())?;
        let mut parent = 0;
        for p in params.into_iter().skip(1) {
            parent = tree.push_child(parent, p)?;
        }
        tree.validate()?;
        Ok(tree)
    }

    /// A bare root; callers add children with [`Hierarchy::push_child`] and
    /// must end with [`Hierarchy::validate`].
    pub fn with_root(depth: usize, gamma: f64, root: NodeParams) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("depth must be positive"));
        }
        root.validate()?;
        Ok(Hierarchy {
            depth,
            gamma,
            nodes: vec![TreeNode {
                params: root,
                moments: NodeMoments::default(),
                parent: None,
                children: Vec::new(),
                level: 1,
            }],
        })
    }

    /// Append a child after the existing children of `parent`. Returns the
    /// new node's index *before* re-canonicalization; indices of later nodes
    /// shift on the next [`Hierarchy::canonicalize`].
    pub fn push_child(&mut self, parent: usize, params: NodeParams) -> Result<usize> {
        let level = self
            .nodes
            .get(parent)
            .ok_or_else(|| Error::invalid(format!("no node {parent}")))?
            .level
            + 1;
        if level > self.depth {
            return Err(Error::invalid("cannot add a node below depth L"));
        }
        if params.mu.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                context: "child mean",
                expected: self.latent_dim(),
                actual: params.mu.len(),
            });
        }
        params.validate()?;
        let idx = self.nodes.len();
        self.nodes.push(TreeNode {
            params,
            moments: NodeMoments::default(),
            parent: Some(parent),
            children: Vec::new(),
            level,
        });
        self.nodes[parent].children.push(idx);
        Ok(idx)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn latent_dim(&self) -> usize {
        self.nodes[0].params.mu.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &TreeNode {
        &self.nodes[idx]
    }

    pub fn node_mut(&mut self, idx: usize) -> &mut TreeNode {
        &mut self.nodes[idx]
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Index of `idx` among its siblings (0-based).
    fn sibling_rank(&self, idx: usize) -> usize {
        match self.nodes[idx].parent {
            None => 0,
            Some(p) => self.nodes[p]
                .children
                .iter()
                .position(|&c| c == idx)
                .expect("child listed under its parent"),
        }
    }

    /// Siblings to the left of `idx` in stick order.
    pub fn left_siblings(&self, idx: usize) -> &[usize] {
        match self.nodes[idx].parent {
            None => &[],
            Some(p) => &self.nodes[p].children[..self.sibling_rank(idx)],
        }
    }

    pub fn path_of(&self, idx: usize) -> PathId {
        let mut rev = Vec::with_capacity(self.depth);
        let mut cur = idx;
        while let Some(p) = self.nodes[cur].parent {
            rev.push(self.sibling_rank(cur) + 1);
            cur = p;
        }
        rev.push(1);
        rev.reverse();
        PathId(rev)
    }

    pub fn find(&self, path: &PathId) -> Option<usize> {
        if path.0.first() != Some(&1) {
            return None;
        }
        let mut cur = 0;
        for &c in &path.0[1..] {
            cur = *self.nodes[cur].children.get(c.checked_sub(1)?)?;
        }
        Some(cur)
    }

    /// Node indices of each full path, root to leaf, in preorder of leaves.
    pub fn full_path_nodes(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.children.is_empty())
            .map(|(i, _)| self.ancestors_inclusive(i))
            .collect()
    }

    fn ancestors_inclusive(&self, idx: usize) -> Vec<usize> {
        let mut chain = vec![idx];
        let mut cur = idx;
        while let Some(p) = self.nodes[cur].parent {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    pub fn full_paths(&self) -> Vec<PathId> {
        self.full_path_nodes()
            .iter()
            .map(|p| self.path_of(*p.last().unwrap()))
            .collect()
    }

    /// Paths ending at internal nodes.
    pub fn inner_paths(&self) -> Vec<PathId> {
        (0..self.nodes.len())
            .filter(|&i| !self.nodes[i].children.is_empty())
            .map(|i| self.path_of(i))
            .collect()
    }

    pub fn num_full_paths(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.is_empty()).count()
    }

    /// Mass of every node given per-full-path masses (in `full_paths` order).
    pub fn node_masses(&self, full_path_mass: &[f64]) -> Vec<f64> {
        let mut mass = vec![0.0; self.nodes.len()];
        for (path, &m) in self.full_path_nodes().iter().zip(full_path_mass) {
            for &n in path {
                mass[n] += m;
            }
        }
        mass
    }

    /// Check every structural and parameter invariant.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || self.nodes[0].parent.is_some() {
            return Err(Error::invalid("tree must have a single root at index 0"));
        }
        let j = self.latent_dim();
        for (i, n) in self.nodes.iter().enumerate() {
            n.params.validate()?;
            if n.params.mu.len() != j {
                return Err(Error::invalid(format!("node {i} has wrong latent dimension")));
            }
            if i > 0 && n.parent.is_none() {
                return Err(Error::invalid("more than one root"));
            }
            if let Some(p) = n.parent {
                if self.nodes[p].level + 1 != n.level || !self.nodes[p].children.contains(&i) {
                    return Err(Error::invalid(format!("node {i} inconsistent with parent")));
                }
            }
            if n.children.is_empty() && n.level != self.depth {
                return Err(Error::invalid(format!(
                    "leaf {} sits at level {} but depth is {}",
                    self.path_of(i),
                    n.level,
                    self.depth
                )));
            }
            if n.level > self.depth {
                return Err(Error::invalid("node deeper than L"));
            }
        }
        Ok(())
    }

    /// Rebuild the arena in depth-first preorder.
    pub fn canonicalize(&mut self) {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            order.push(i);
            for &c in self.nodes[i].children.iter().rev() {
                stack.push(c);
            }
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let mut old_nodes: Vec<Option<TreeNode>> = self.nodes.drain(..).map(Some).collect();
        self.nodes = order
            .iter()
            .map(|&old| {
                let mut n = old_nodes[old].take().expect("each node visited once");
                n.parent = n.parent.map(|p| remap[p]);
                n.children = n.children.iter().map(|&c| remap[c]).collect();
                n
            })
            .collect();
    }

    /// Detach the subtree at `idx` (never the root) and drop every node no
    /// longer reachable, then re-canonicalize.
    fn remove_subtree(&mut self, idx: usize) {
        if let Some(p) = self.nodes[idx].parent {
            self.nodes[p].children.retain(|&c| c != idx);
        }
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            reachable[i] = true;
            stack.extend(self.nodes[i].children.iter().copied());
        }
        // canonicalize only walks reachable nodes; compact the rest away
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut kept = Vec::new();
        for (i, n) in self.nodes.drain(..).enumerate() {
            if reachable[i] {
                remap[i] = kept.len();
                kept.push(n);
            }
        }
        for n in &mut kept {
            n.parent = n.parent.map(|p| remap[p]);
            n.children = n.children.iter().map(|&c| remap[c]).collect();
        }
        self.nodes = kept;
        self.canonicalize();
    }

    /// Remove the leaf at `leaf` and every ancestor left without children.
    /// Returns the indices (pre-removal) of removed nodes, leaf first.
    fn remove_full_path(&mut self, leaf: usize) -> Vec<usize> {
        let mut removed = vec![leaf];
        let mut top = leaf;
        while let Some(p) = self.nodes[top].parent {
            if self.nodes[p].children.len() == 1 && self.nodes[p].parent.is_some() {
                removed.push(p);
                top = p;
            } else {
                break;
            }
        }
        self.remove_subtree(top);
        removed
    }
}

/// Stick-breaking weights `π_i = v_i Π_{j<i} (1 − v_j)`.
pub fn stick_weights(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("stick draw {bad} outside [0, 1]")));
    }
    let mut remaining = 1.0;
    Ok(v.iter()
        .map(|&vi| {
            let pi = vi * remaining;
            remaining *= 1.0 - vi;
            pi
        })
        .collect())
}

/// Expected log stick-breaking contribution of a single node:
/// `E[log v_node] + Σ_{left siblings s} E[log(1 − v_s)]`. The root is shared
/// by every path, so its stick is degenerate and contributes 0.
pub fn node_log_prior(tree: &Hierarchy, idx: usize) -> f64 {
    if idx == 0 {
        return 0.0;
    }
    let own = tree.nodes[idx].params.expected_log_v();
    let left: f64 = tree
        .left_siblings(idx)
        .iter()
        .map(|&s| tree.nodes[s].params.expected_log_one_minus_v())
        .sum();
    own + left
}

/// `E_q[log p(ζ | v)]` for a full path: the node contributions summed from
/// the root to the leaf.
pub fn expected_log_path_prior(tree: &Hierarchy, path: &PathId) -> Result<f64> {
    let leaf = tree
        .find(path)
        .ok_or_else(|| Error::UnknownPath(path.to_string()))?;
    if path.len() != tree.depth {
        return Err(Error::invalid(format!("{path} is not a full path")));
    }
    Ok(tree
        .ancestors_inclusive(leaf)
        .into_iter()
        .map(|n| node_log_prior(tree, n))
        .sum())
}

/// Sample `key` from a weight map proportionally. Weights must be
/// nonnegative with a positive total.
fn sample_proportional<'a, K, R: Rng + ?Sized>(items: &'a [(K, f64)], rng: &mut R) -> Result<&'a K> {
    let total: f64 = items.iter().map(|(_, w)| *w).sum();
    if items.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) || !(total > 0.0) {
        return Err(Error::invalid("masses must be nonnegative with positive total"));
    }
    let mut u = rng.random::<f64>() * total;
    for (k, w) in items {
        if u < *w {
            return Ok(k);
        }
        u -= w;
    }
    Ok(&items.iter().rev().find(|(_, w)| *w > 0.0).unwrap().0)
}

fn new_child_params<R: Rng + ?Sized>(parent: &NodeParams, gamma: f64, rng: &mut R) -> NodeParams {
    let mu = parent
        .mu
        .iter()
        .zip(&parent.sigma2)
        .map(|(&m, &s2)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + 0.1 * s2.sqrt() * eps
        })
        .collect();
    NodeParams {
        mu,
        sigma2: parent.sigma2.iter().map(|s| 0.5 * s).collect(),
        a: 1.0,
        b: gamma,
    }
}

/// GROW: sample one path proportionally to its mass; if it is an inner
/// path, hang a new chain under its terminal node down to depth `L`.
///
/// `path_mass` must cover every inner and full path of the tree.
pub fn grow<R: Rng + ?Sized>(
    tree: &mut Hierarchy,
    path_mass: &BTreeMap<PathId, f64>,
    rng: &mut R,
) -> Result<bool> {
    if path_mass.is_empty() {
        return Err(Error::invalid("GROW needs a non-empty path mass map"));
    }
    for p in tree.full_paths().into_iter().chain(tree.inner_paths()) {
        if !path_mass.contains_key(&p) {
            return Err(Error::invalid(format!("path mass map misses {p}")));
        }
    }
    let items: Vec<(PathId, f64)> = path_mass.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let chosen = sample_proportional(&items, rng)?.clone();
    if chosen.len() >= tree.depth {
        return Ok(false);
    }
    let mut parent = tree
        .find(&chosen)
        .ok_or_else(|| Error::UnknownPath(chosen.to_string()))?;
    let gamma = tree.gamma;
    for _ in chosen.len()..tree.depth {
        let params = new_child_params(&tree.nodes[parent].params, gamma, rng);
        parent = tree.push_child(parent, params)?;
    }
    tree.canonicalize();
    Ok(true)
}

/// PRUNE: remove one full path, drawn uniformly among those whose share of
/// the total mass is below `delta`, along with ancestors left childless.
/// The last remaining full path is never removed.
pub fn prune<R: Rng + ?Sized>(
    tree: &mut Hierarchy,
    path_mass: &BTreeMap<PathId, f64>,
    delta: f64,
    rng: &mut R,
) -> Result<bool> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("PRUNE threshold {delta} outside (0, 1)")));
    }
    let full = tree.full_paths();
    if full.len() < 2 {
        return Ok(false);
    }
    let masses: Vec<f64> = full
        .iter()
        .map(|p| path_mass.get(p).copied().unwrap_or(0.0))
        .collect();
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return Ok(false);
    }
    let minor: Vec<&PathId> = full
        .iter()
        .zip(&masses)
        .filter(|(_, &m)| m / total < delta)
        .map(|(p, _)| p)
        .collect();
    if minor.is_empty() {
        return Ok(false);
    }
    let victim = minor[rng.random_range(0..minor.len())];
    let leaf = tree.find(victim).expect("full path exists");
    tree.remove_full_path(leaf);
    Ok(true)
}

/// Cosine similarity `q_i·q_j / (|q_i| |q_j|)` between two posterior columns.
pub fn posterior_similarity(qi: &[f64], qj: &[f64]) -> f64 {
    let dot: f64 = qi.iter().zip(qj).map(|(a, b)| a * b).sum();
    let ni = qi.iter().map(|a| a * a).sum::<f64>();
    let nj = qj.iter().map(|a| a * a).sum::<f64>();
    if ni == 0.0 || nj == 0.0 {
        0.0
    } else {
        dot / (ni * nj).sqrt()
    }
}

/// Outcome of a MERGE check.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub changed: bool,
    pub similarity: f64,
    /// (kept, absorbed) full paths, as they were before the merge.
    pub pair: Option<(PathId, PathId)>,
}

/// MERGE: find the pair of full paths whose posterior columns have maximal
/// cosine similarity; if it reaches `threshold`, the lighter path's exclusive
/// chain is removed and its parameters folded into the corresponding nodes
/// of the heavier path, weighted by node mass.
///
/// `q_matrix[n][k]` is `q(ζ_n = k-th full path)`.
pub fn merge(tree: &mut Hierarchy, q_matrix: &[Vec<f64>], threshold: f64) -> Result<MergeOutcome> {
    let paths = tree.full_path_nodes();
    let k = paths.len();
    let unchanged = |s| MergeOutcome {
        changed: false,
        similarity: s,
        pair: None,
    };
    if k < 2 {
        return Ok(unchanged(0.0));
    }
    if let Some(row) = q_matrix.iter().find(|r| r.len() != k) {
        return Err(Error::DimensionMismatch {
            context: "MERGE posterior matrix columns",
            expected: k,
            actual: row.len(),
        });
    }
    let columns: Vec<Vec<f64>> = (0..k)
        .map(|c| q_matrix.iter().map(|r| r[c]).collect())
        .collect();
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for i in 0..k {
        for j in (i + 1)..k {
            let s = posterior_similarity(&columns[i], &columns[j]);
            if s > best.0 {
                best = (s, i, j);
            }
        }
    }
    let (sim, i, j) = best;
    if sim < threshold {
        return Ok(unchanged(sim));
    }
    let path_mass: Vec<f64> = columns.iter().map(|c| c.iter().sum()).collect();
    let node_mass = tree.node_masses(&path_mass);
    let (keep, drop) = if path_mass[j] > path_mass[i] { (j, i) } else { (i, j) };
    let kept_id = tree.path_of(*paths[keep].last().unwrap());
    let dropped_id = tree.path_of(*paths[drop].last().unwrap());

    // exclusive chain of the absorbed path: the nodes removal would delete
    let mut exclusive = vec![*paths[drop].last().unwrap()];
    let mut top = exclusive[0];
    while let Some(p) = tree.nodes[top].parent {
        if tree.nodes[p].children.len() == 1 && tree.nodes[p].parent.is_some() {
            exclusive.push(p);
            top = p;
        } else {
            break;
        }
    }
    for &absorbed in &exclusive {
        let level = tree.nodes[absorbed].level;
        let target = paths[keep][level - 1];
        if target == absorbed {
            continue;
        }
        let (wt, wa) = (node_mass[target], node_mass[absorbed]);
        let total = wt + wa;
        let (ft, fa) = if total > 0.0 { (wt / total, wa / total) } else { (0.5, 0.5) };
        let src = tree.nodes[absorbed].params.clone();
        let dst = &mut tree.nodes[target].params;
        for (d, s) in dst.mu.iter_mut().zip(&src.mu) {
            *d = ft * *d + fa * s;
        }
        for (d, s) in dst.sigma2.iter_mut().zip(&src.sigma2) {
            *d = ft * *d + fa * s;
        }
        dst.a = ft * dst.a + fa * src.a;
        dst.b = ft * dst.b + fa * src.b;
    }
    tree.remove_full_path(*paths[drop].last().unwrap());
    Ok(MergeOutcome {
        changed: true,
        similarity: sim,
        pair: Some((kept_id, dropped_id)),
    })
}

// ---------------------------------------------------------------------------
// Serialization

pub const TREE_FORMAT_VERSION: u32 = 1;

/// Versioned JSON document describing a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub format: String,
    pub version: u32,
    pub depth: usize,
    pub gamma: f64,
    pub root: NodeDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub id: String,
    pub level: usize,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub a: f64,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    pub children: Vec<NodeDocument>,
}

impl Hierarchy {
    pub fn to_document(&self, masses: Option<&[f64]>) -> TreeDocument {
        fn build(tree: &Hierarchy, idx: usize, masses: Option<&[f64]>) -> NodeDocument {
            let n = &tree.nodes[idx];
            NodeDocument {
                id: tree.path_of(idx).to_string(),
                level: n.level,
                mu: n.params.mu.clone(),
                sigma2: n.params.sigma2.clone(),
                a: n.params.a,
                b: n.params.b,
                mass: masses.map(|m| m[idx]),
                children: n.children.iter().map(|&c| build(tree, c, masses)).collect(),
            }
        }
        TreeDocument {
            format: "hcrl-tree".into(),
            version: TREE_FORMAT_VERSION,
            depth: self.depth,
            gamma: self.gamma,
            root: build(self, 0, masses),
        }
    }

    /// Rebuild from a document. Returns per-node masses when every node
    /// carries one.
    pub fn from_document(doc: &TreeDocument) -> Result<(Self, Option<Vec<f64>>)> {
        if doc.version != TREE_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported tree format version {}",
                doc.version
            )));
        }
        let root_params = NodeParams::new(doc.root.mu.clone(), doc.root.sigma2.clone(), doc.root.a, doc.root.b)?;
        let mut tree = Hierarchy::with_root(doc.depth, doc.gamma, root_params)?;
        let mut masses = vec![doc.root.mass];
        fn attach(
            tree: &mut Hierarchy,
            parent: usize,
            node: &NodeDocument,
            masses: &mut Vec<Option<f64>>,
        ) -> Result<()> {
            for child in &node.children {
                let p = NodeParams::new(child.mu.clone(), child.sigma2.clone(), child.a, child.b)?;
                let idx = tree.push_child(parent, p)?;
                masses.push(child.mass);
                attach(tree, idx, child, masses)?;
            }
            Ok(())
        }
        attach(&mut tree, 0, &doc.root, &mut masses)?;
        // children were attached depth-first, so the arena is already preorder
        tree.validate()?;
        let masses = masses.into_iter().collect::<Option<Vec<f64>>>();
        Ok((tree, masses))
    }

    pub fn to_json(&self, masses: Option<&[f64]>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document(masses))?)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<Vec<f64>>)> {
        let doc: TreeDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    /// Graphviz rendering: one node per tree node labelled with its level
    /// (and mass when given), one edge per parent-child link.
    pub fn to_dot(&self, masses: Option<&[f64]>) -> String {
        let mut out = String::from("digraph hierarchy {\n  node [shape=box];\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let id = self.path_of(i);
            let mut label = format!("{id}\\nlevel {}", n.level);
            if let Some(m) = masses {
                label.push_str(&format!("\\nmass {:.3}", m[i]));
            }
            out.push_str(&format!("  \"{id}\" [label=\"{label}\"];\n"));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            for &c in &n.children {
                out.push_str(&format!("  \"{}\" -> \"{}\";\n", self.path_of(i), self.path_of(c)));
            }
        }
        out.push_str("}\n");
        out
    }
}
