//! Discrete path spaces: scenario trees, leaf partitions and filtrations.
//!
//! A [`ScenarioTree`] is a rooted, non-recombining tree whose root-to-leaf
//! paths are the possible trajectories of a discretised Brownian motion.
//! Information is modelled by [`FiltrationSeq`], one leaf partition per time
//! step, always sandwiched between the natural (node) filtration and the
//! discrete partition at the horizon.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default cap on the number of leaves of a tree.
pub const DEFAULT_LEAF_CAP: usize = 1 << 16;

/// Probability normalisation tolerance.
pub const PROB_TOL: f64 = 1e-12;

/// Maximal number of label classes of an [`AtomLabeling`].
pub const MAX_LABELS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    pub depth: usize,
    /// Cumulative path value at this node.
    pub value: f64,
    /// Increment on the edge from the parent (0 at the root).
    pub incr: f64,
    /// Probability of the edge from the parent (1 at the root).
    pub prob: f64,
    pub children: Vec<usize>,
}

/// A rooted finite tree carrying a discrete path measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    steps: usize,
    dt: f64,
    nodes: Vec<Node>,
    leaves: Vec<usize>,
    leaf_prob: Vec<f64>,
    /// `ancestors[leaf][k]` is the node id of the depth-k ancestor.
    ancestors: Vec<Vec<usize>>,
}

/// One edge of the serialised tree format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub incr: f64,
    pub prob: f64,
}

/// On-disk tree format: `{steps, dt, edges: [{parent, child, incr, prob}], labels?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub steps: usize,
    pub dt: f64,
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

impl ScenarioTree {
    /// Builds a tree from an edge list. Node ids are arbitrary; the root is
    /// the unique node that never appears as a child. Children keep the
    /// order in which their edges are listed, which fixes the leaf order.
    pub fn from_edges(steps: usize, dt: f64, edges: &[Edge]) -> Result<Self> {
        Self::from_edges_with_cap(steps, dt, edges, DEFAULT_LEAF_CAP)
    }

    pub fn from_edges_with_cap(steps: usize, dt: f64, edges: &[Edge], leaf_cap: usize) -> Result<Self> {
        if steps == 0 {
            return invalid("tree needs at least one step");
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return invalid(format!("dt must be positive, got {dt}"));
        }
        if edges.is_empty() {
            return invalid("empty edge list");
        }

        let mut ids: HashMap<usize, usize> = HashMap::new();
        let intern = |raw: usize, ids: &mut HashMap<usize, usize>| {
            let n = ids.len();
            *ids.entry(raw).or_insert(n)
        };
        let mut parent_of: HashMap<usize, usize> = HashMap::new();
        let mut children: Vec<Vec<(usize, f64, f64)>> = Vec::new();
        for e in edges {
            let p = intern(e.parent, &mut ids);
            let c = intern(e.child, &mut ids);
            if children.len() < ids.len() {
                children.resize(ids.len(), Vec::new());
            }
            if !(e.prob > 0.0 && e.prob <= 1.0) {
                return invalid(format!("edge {}->{} has probability {} outside (0,1]", e.parent, e.child, e.prob));
            }
            if !e.incr.is_finite() {
                return invalid(format!("edge {}->{} has non-finite increment", e.parent, e.child));
            }
            if parent_of.insert(c, p).is_some() {
                return invalid(format!("node {} has two parents", e.child));
            }
            children[p].push((c, e.incr, e.prob));
        }
        let roots: Vec<usize> = (0..ids.len()).filter(|i| !parent_of.contains_key(i)).collect();
        if roots.len() != 1 {
            return invalid(format!("expected exactly one root, found {}", roots.len()));
        }

        // Depth-first relabelling so that node and leaf order are canonical.
        let mut nodes = Vec::with_capacity(ids.len());
        let mut leaves = Vec::new();
        let mut stack = vec![(roots[0], None::<usize>, 0usize, 0.0f64, 0.0f64, 1.0f64)];
        let mut visited = 0usize;
        while let Some((raw, parent, depth, value, incr, prob)) = stack.pop() {
            visited += 1;
            if depth > steps {
                return invalid(format!("path longer than {steps} steps"));
            }
            let id = nodes.len();
            nodes.push(Node { parent, depth, value, incr, prob, children: Vec::new() });
            if let Some(p) = parent {
                nodes[p].children.push(id);
            }
            let kids = &children[raw];
            if kids.is_empty() {
                if depth != steps {
                    return invalid(format!("leaf at depth {depth}, expected {steps}"));
                }
                leaves.push(id);
                if leaves.len() > leaf_cap {
                    return Err(Error::Capacity { what: "leaves", size: leaves.len(), cap: leaf_cap });
                }
            } else {
                let total: f64 = kids.iter().map(|k| k.2).sum();
                if (total - 1.0).abs() > PROB_TOL {
                    return invalid(format!("edge probabilities out of a node sum to {total}"));
                }
                for &(c, inc, pr) in kids.iter().rev() {
                    stack.push((c, Some(id), depth + 1, value + inc, inc, pr));
                }
            }
        }
        if visited != ids.len() {
            return invalid("edge list is not a connected tree");
        }
        Ok(Self::finish(steps, dt, nodes, leaves))
    }

    fn finish(steps: usize, dt: f64, nodes: Vec<Node>, leaves: Vec<usize>) -> Self {
        let mut ancestors = Vec::with_capacity(leaves.len());
        let mut leaf_prob = Vec::with_capacity(leaves.len());
        for &leaf in &leaves {
            let mut chain = vec![0; steps + 1];
            let mut p = 1.0;
            let mut cur = leaf;
            loop {
                let n = &nodes[cur];
                chain[n.depth] = cur;
                p *= n.prob;
                match n.parent {
                    Some(q) => cur = q,
                    None => break,
                }
            }
            ancestors.push(chain);
            leaf_prob.push(p);
        }
        Self { steps, dt, nodes, leaves, leaf_prob, ancestors }
    }

    pub fn from_file(file: &TreeFile) -> Result<Self> {
        Self::from_edges(file.steps, file.dt, &file.edges)
    }

    pub fn to_file(&self) -> TreeFile {
        let edges = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| n.parent.map(|p| Edge { parent: p, child: id, incr: n.incr, prob: n.prob }))
            .collect();
        TreeFile { steps: self.steps, dt: self.dt, edges, labels: None }
    }

    /// Replaces the probability of every edge by `prob(node)`, keeping the
    /// skeleton and the increments.
    pub fn reweighted(&self, prob: impl Fn(&Node) -> f64) -> Result<Self> {
        let edges: Vec<Edge> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| n.parent.map(|p| Edge { parent: p, child: id, incr: n.incr, prob: prob(n) }))
            .collect();
        Self::from_edges(self.steps, self.dt, &edges)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Node ids of the leaves, in leaf order.
    pub fn leaf_nodes(&self) -> &[usize] {
        &self.leaves
    }

    pub fn leaf_prob(&self) -> &[f64] {
        &self.leaf_prob
    }

    /// Node id of the depth-`k` ancestor of `leaf`.
    pub fn ancestor(&self, leaf: usize, k: usize) -> usize {
        self.ancestors[leaf][k]
    }

    /// Cumulative value of `leaf`'s path at step `k`.
    pub fn value(&self, leaf: usize, k: usize) -> f64 {
        self.nodes[self.ancestors[leaf][k]].value
    }

    /// Increment Δω_k = ω_k − ω_{k−1} of `leaf`'s path, for `k ≥ 1`.
    pub fn incr(&self, leaf: usize, k: usize) -> f64 {
        self.nodes[self.ancestors[leaf][k]].incr
    }

    /// Cumulative values ω_0 … ω_N of a leaf's path.
    pub fn path(&self, leaf: usize) -> Vec<f64> {
        self.ancestors[leaf].iter().map(|&n| self.nodes[n].value).collect()
    }

    /// Total probability of a set of leaves.
    pub fn mass(&self, leaves: &[usize]) -> f64 {
        leaves.iter().map(|&l| self.leaf_prob[l]).sum()
    }

    /// Expectation of a leaf functional.
    pub fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.n_leaves()).map(|l| self.leaf_prob[l] * f(l)).sum()
    }
}

/// Symmetric binomial walk with increments ±√(T/N) of probability ½.
pub fn build_binomial(n: usize, horizon: f64) -> Result<ScenarioTree> {
    build_binomial_p(n, horizon, 0.5)
}

/// Binomial walk with increments ±√(T/N), up-probability `p`.
pub fn build_binomial_p(n: usize, horizon: f64, p: f64) -> Result<ScenarioTree> {
    if n == 0 {
        return invalid("binomial tree needs N ≥ 1");
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return invalid(format!("horizon must be positive, got {horizon}"));
    }
    if !(p > 0.0 && p < 1.0) {
        return invalid(format!("up-probability must lie in (0,1), got {p}"));
    }
    if n >= usize::BITS as usize - 1 || (1usize << n) > DEFAULT_LEAF_CAP {
        let size = if n < 63 { 1usize << n } else { usize::MAX };
        return Err(Error::Capacity { what: "leaves", size, cap: DEFAULT_LEAF_CAP });
    }
    let dt = horizon / n as f64;
    let h = dt.sqrt();
    let mut edges = Vec::with_capacity((1usize << (n + 1)) - 2);
    let mut next_id = 1usize;
    let mut frontier = vec![0usize];
    for _ in 0..n {
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for &parent in &frontier {
            for (incr, prob) in [(h, p), (-h, 1.0 - p)] {
                edges.push(Edge { parent, child: next_id, incr, prob });
                next.push(next_id);
                next_id += 1;
            }
        }
        frontier = next;
    }
    ScenarioTree::from_edges(n, dt, &edges)
}

/// A partition of the leaf set into disjoint nonempty atoms.
///
/// Atoms are stored in canonical order (by smallest leaf), and each atom
/// lists its leaves in increasing order, so structural equality coincides
/// with equality of partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    atoms: Vec<Vec<usize>>,
    atom_of: Vec<usize>,
}

impl Partition {
    /// Groups leaves `0..keys.len()` by equal key.
    pub fn from_keys<K: Eq + Hash>(keys: &[K]) -> Self {
        let mut index: HashMap<&K, usize> = HashMap::new();
        let mut atoms: Vec<Vec<usize>> = Vec::new();
        let mut atom_of = vec![0; keys.len()];
        for (leaf, key) in keys.iter().enumerate() {
            let a = *index.entry(key).or_insert_with(|| {
                atoms.push(Vec::new());
                atoms.len() - 1
            });
            atoms[a].push(leaf);
            atom_of[leaf] = a;
        }
        Self { atoms, atom_of }
    }

    /// Builds a partition from explicit atoms, validating that they cover
    /// `0..n_leaves` exactly once.
    pub fn from_atoms(n_leaves: usize, atoms: &[Vec<usize>]) -> Result<Self> {
        let mut keys = vec![usize::MAX; n_leaves];
        for (a, atom) in atoms.iter().enumerate() {
            if atom.is_empty() {
                return invalid("empty atom");
            }
            for &l in atom {
                if l >= n_leaves {
                    return invalid(format!("leaf {l} out of range"));
                }
                if keys[l] != usize::MAX {
                    return invalid(format!("leaf {l} belongs to two atoms"));
                }
                keys[l] = a;
            }
        }
        if keys.contains(&usize::MAX) {
            return invalid("atoms do not cover the leaf set");
        }
        Ok(Self::from_keys(&keys))
    }

    pub fn trivial(n_leaves: usize) -> Self {
        Self::from_keys(&vec![0u8; n_leaves])
    }

    pub fn discrete(n_leaves: usize) -> Self {
        Self::from_keys(&(0..n_leaves).collect::<Vec<_>>())
    }

    pub fn atoms(&self) -> &[Vec<usize>] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn n_leaves(&self) -> usize {
        self.atom_of.len()
    }

    /// Index of the atom containing `leaf`.
    pub fn atom_of(&self, leaf: usize) -> usize {
        self.atom_of[leaf]
    }

    /// True when every atom of `self` lies inside a single atom of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        self.n_leaves() == coarser.n_leaves()
            && self.atoms.iter().all(|atom| {
                let a = coarser.atom_of(atom[0]);
                atom.iter().all(|&l| coarser.atom_of(l) == a)
            })
    }

    /// Common refinement of `self` and `other`.
    pub fn meet(&self, other: &Partition) -> Partition {
        let keys: Vec<(usize, usize)> = (0..self.n_leaves()).map(|l| (self.atom_of(l), other.atom_of(l))).collect();
        Partition::from_keys(&keys)
    }

    /// For each atom of `self`, the indices of the atoms of `finer` it contains.
    pub fn children_in(&self, finer: &Partition) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (b, atom) in finer.atoms.iter().enumerate() {
            out[self.atom_of(atom[0])].push(b);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FiltrationKind {
    Natural,
    Enlarged,
}

/// Time-indexed sequence of leaf partitions `P_0 ⊆ … ⊆ P_N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiltrationSeq {
    partitions: Vec<Partition>,
    kind: FiltrationKind,
}

impl FiltrationSeq {
    /// Validates the refinement chain, the inclusion of the natural
    /// filtration of `tree` and terminal coincidence.
    pub fn new(tree: &ScenarioTree, partitions: Vec<Partition>, kind: FiltrationKind) -> Result<Self> {
        let n = tree.steps();
        if partitions.len() != n + 1 {
            return invalid(format!("filtration needs {} partitions, got {}", n + 1, partitions.len()));
        }
        let natural = natural_partitions(tree);
        for (k, p) in partitions.iter().enumerate() {
            if p.n_leaves() != tree.n_leaves() {
                return invalid(format!("P_{k} is over {} leaves, tree has {}", p.n_leaves(), tree.n_leaves()));
            }
            if !p.refines(&natural[k]) {
                return invalid(format!("P_{k} does not refine the natural partition at depth {k}"));
            }
            if k > 0 && !p.refines(&partitions[k - 1]) {
                return invalid(format!("P_{k} does not refine P_{}", k - 1));
            }
        }
        if partitions[n].len() != tree.n_leaves() {
            return invalid("terminal partition must consist of singletons");
        }
        Ok(Self { partitions, kind })
    }

    pub fn steps(&self) -> usize {
        self.partitions.len() - 1
    }

    pub fn at(&self, k: usize) -> &Partition {
        &self.partitions[k]
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn kind(&self) -> FiltrationKind {
        self.kind
    }

    /// True when `P_k(self)` refines `P_k(other)` for every k.
    pub fn contains(&self, other: &FiltrationSeq) -> bool {
        self.partitions.len() == other.partitions.len()
            && self.partitions.iter().zip(&other.partitions).all(|(a, b)| a.refines(b))
    }

    /// Full information from time 0 on: every partition is discrete.
    pub fn full_information(tree: &ScenarioTree) -> Self {
        let p = Partition::discrete(tree.n_leaves());
        Self { partitions: vec![p; tree.steps() + 1], kind: FiltrationKind::Enlarged }
    }
}

fn natural_partitions(tree: &ScenarioTree) -> Vec<Partition> {
    (0..=tree.steps())
        .map(|k| {
            let keys: Vec<usize> = (0..tree.n_leaves()).map(|l| tree.ancestor(l, k)).collect();
            Partition::from_keys(&keys)
        })
        .collect()
}

/// Natural filtration: `P_k` groups leaves by their depth-k ancestor.
pub fn natural_filtration(tree: &ScenarioTree) -> FiltrationSeq {
    FiltrationSeq { partitions: natural_partitions(tree), kind: FiltrationKind::Natural }
}

/// Finite labelling of the leaves, used for initial enlargements.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomLabeling {
    /// Class index (0-based, ordered by raw label value) of each leaf.
    classes: Vec<usize>,
    /// Raw label of each class.
    raw: Vec<u32>,
    /// Probability of each class.
    probs: Vec<f64>,
}

impl AtomLabeling {
    pub fn new(tree: &ScenarioTree, labels: &[u32]) -> Result<Self> {
        if labels.len() != tree.n_leaves() {
            return Err(Error::LengthMismatch(labels.len(), tree.n_leaves()));
        }
        let mut raw: Vec<u32> = labels.to_vec();
        raw.sort_unstable();
        raw.dedup();
        if raw.len() > MAX_LABELS {
            return invalid(format!("{} label classes exceed the limit of {MAX_LABELS}", raw.len()));
        }
        let classes: Vec<usize> = labels.iter().map(|l| raw.binary_search(l).unwrap_or_default()).collect();
        let mut probs = vec![0.0; raw.len()];
        for (leaf, &c) in classes.iter().enumerate() {
            probs[c] += tree.leaf_prob()[leaf];
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return invalid(format!("label class probabilities sum to {total}"));
        }
        Ok(Self { classes, raw, probs })
    }

    /// Labels by the sign of the terminal value; 0 counts as positive.
    pub fn sign_terminal(tree: &ScenarioTree) -> Self {
        let labels: Vec<u32> = (0..tree.n_leaves())
            .map(|l| if tree.value(l, tree.steps()) >= -1e-12 { 1 } else { 0 })
            .collect();
        Self::new(tree, &labels).expect("sign labelling is always valid")
    }

    /// Labels by the terminal value (grouped at resolution 1e-9).
    pub fn terminal_value(tree: &ScenarioTree) -> Result<Self> {
        let keys: Vec<i64> = (0..tree.n_leaves())
            .map(|l| (tree.value(l, tree.steps()) * 1e9).round() as i64)
            .collect();
        let mut distinct = keys.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let labels: Vec<u32> = keys.iter().map(|k| distinct.binary_search(k).unwrap_or_default() as u32).collect();
        Self::new(tree, &labels)
    }

    /// Labels every leaf by its own index (full terminal information).
    pub fn leaf_identity(tree: &ScenarioTree) -> Result<Self> {
        let labels: Vec<u32> = (0..tree.n_leaves() as u32).collect();
        Self::new(tree, &labels)
    }

    pub fn n_classes(&self) -> usize {
        self.raw.len()
    }

    pub fn class_of(&self, leaf: usize) -> usize {
        self.classes[leaf]
    }

    pub fn raw_labels(&self) -> &[u32] {
        &self.raw
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_leaves(&self) -> usize {
        self.classes.len()
    }
}

/// Initial enlargement: `G_k` atoms are the nonempty `F_k ∩ {L = l}`.
pub fn enlarge_initial(f: &FiltrationSeq, labels: &AtomLabeling) -> Result<FiltrationSeq> {
    if labels.n_leaves() != f.at(0).n_leaves() {
        return Err(Error::LengthMismatch(labels.n_leaves(), f.at(0).n_leaves()));
    }
    let by_label = Partition::from_keys(&labels.classes);
    let partitions = f.partitions.iter().map(|p| p.meet(&by_label)).collect();
    Ok(FiltrationSeq { partitions, kind: FiltrationKind::Enlarged })
}

/// Progressive enlargement: `G_k = F_k ∨ σ(τ ∧ k)`.
pub fn enlarge_progressive(f: &FiltrationSeq, tau: &[usize]) -> Result<FiltrationSeq> {
    let n_leaves = f.at(0).n_leaves();
    if tau.len() != n_leaves {
        return Err(Error::LengthMismatch(tau.len(), n_leaves));
    }
    let partitions = f
        .partitions
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let stopped = Partition::from_keys(&tau.iter().map(|&t| t.min(k)).collect::<Vec<_>>());
            p.meet(&stopped)
        })
        .collect();
    Ok(FiltrationSeq { partitions, kind: FiltrationKind::Enlarged })
}

/// Index of the last step at which each leaf's path sits at 0.
pub fn last_zero_time(tree: &ScenarioTree) -> Vec<usize> {
    (0..tree.n_leaves())
        .map(|l| (0..=tree.steps()).rev().find(|&k| tree.value(l, k).abs() <= 1e-12).unwrap_or(0))
        .collect()
}

/// First step `k ≥ from` at which the path is at 0, or N if it never is.
pub fn first_hitting_time_of_zero(tree: &ScenarioTree, from: usize) -> Vec<usize> {
    (0..tree.n_leaves())
        .map(|l| (from..=tree.steps()).find(|&k| tree.value(l, k).abs() <= 1e-12).unwrap_or(tree.steps()))
        .collect()
}
