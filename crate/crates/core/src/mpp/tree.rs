//! Exact finite scenario trees of the driving noise.
//!
//! Each step of the grid `0 = t_0 < … < t_M = T` carries at most one jump in
//! total. With `n` independent sources (particles) and `m` marks a node has
//! `1 + n·m` children: branch `0` is "no jump", branch `1 + j·m + k` is "source
//! `j` jumps with mark `k`". Branch probabilities are
//!
//! ```text
//! p_{j,k} = φ_k ΔA_i,   p_0 = 1 − n φ_tot ΔA_i,
//! ```
//!
//! so every source sees exactly the single-source step law and sources never
//! jump together.
//!
//! Two layouts are supported. [`TreeKind::Full`] keeps one node per history and
//! is what path enumeration and stopping-rule enumeration need.
//! [`TreeKind::Recombining`] merges nodes with identical per-source jump counts;
//! it is exact whenever the data depend on the path only through those counts
//! and scales to fine grids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Clock, IntensityKernel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TreeKind {
    Full,
    #[default]
    Recombining,
}

pub type NodeId = usize;

const NO_PARENT: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct ScenarioTree {
    kind: TreeKind,
    sources: usize,
    marks: usize,
    weights: Vec<f64>,
    grid: Vec<f64>,
    clock_values: Vec<f64>,
    d_a: Vec<f64>,
    branch_probs: Vec<Vec<f64>>,
    level_start: Vec<usize>,
    children: Vec<NodeId>,
    reach: Vec<f64>,
    counts: Vec<u32>,
    parent: Vec<(usize, usize)>,
}

/// Builder for [`ScenarioTree`].
pub struct TreeBuilder<'a> {
    kernel: &'a IntensityKernel,
    clock: &'a Clock,
    steps: usize,
    sources: usize,
    kind: TreeKind,
    budget: Option<u128>,
}

impl<'a> TreeBuilder<'a> {
    pub fn sources(mut self, n: usize) -> Self {
        self.sources = n;
        self
    }

    pub fn kind(mut self, kind: TreeKind) -> Self {
        self.kind = kind;
        self
    }

    /// Maximum number of leaves (full trees) or nodes (recombining trees).
    pub fn budget(mut self, budget: u128) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn build(self) -> Result<ScenarioTree> {
        ScenarioTree::construct(self)
    }
}

impl ScenarioTree {
    /// Full single-source tree with `steps` steps.
    pub fn build(kernel: &IntensityKernel, clock: &Clock, steps: usize) -> Result<Self> {
        Self::builder(kernel, clock, steps).kind(TreeKind::Full).build()
    }

    pub fn builder<'a>(kernel: &'a IntensityKernel, clock: &'a Clock, steps: usize) -> TreeBuilder<'a> {
        TreeBuilder { kernel, clock, steps, sources: 1, kind: TreeKind::Full, budget: None }
    }

    /// Number of leaves a full tree with this shape would have.
    pub fn full_leaf_count(branching: usize, steps: usize) -> u128 {
        (branching as u128).checked_pow(steps as u32).unwrap_or(u128::MAX)
    }

    fn construct(b: TreeBuilder<'_>) -> Result<Self> {
        if b.steps == 0 {
            return Err(Error::Config("tree needs at least one step".into()));
        }
        if b.sources == 0 {
            return Err(Error::Config("tree needs at least one source".into()));
        }
        let marks = b.kernel.len();
        let weights = b.kernel.weights().to_vec();
        let branching = 1 + b.sources * marks;
        let horizon = b.clock.horizon();
        let grid: Vec<f64> = (0..=b.steps).map(|i| horizon * i as f64 / b.steps as f64).collect();
        let clock_values: Vec<f64> = grid.iter().map(|&t| b.clock.eval(t)).collect();
        let d_a: Vec<f64> = clock_values.windows(2).map(|w| w[1] - w[0]).collect();

        let mut branch_probs = Vec::with_capacity(b.steps);
        for (step, &da) in d_a.iter().enumerate() {
            let mut probs = vec![0.0; branching];
            for j in 0..b.sources {
                for (k, &w) in weights.iter().enumerate() {
                    probs[1 + j * marks + k] = w * da;
                }
            }
            let jump: f64 = probs[1..].iter().sum();
            let p0 = 1.0 - jump;
            if p0 <= 0.0 {
                return Err(Error::GridTooCoarse { step, p0 });
            }
            probs[0] = p0;
            branch_probs.push(probs);
        }

        if b.kind == TreeKind::Full {
            let leaves = Self::full_leaf_count(branching, b.steps);
            if let Some(budget) = b.budget {
                if leaves > budget {
                    return Err(Error::Budget { what: "full tree leaves".into(), required: leaves, budget });
                }
            }
            if leaves > (1u128 << 26) {
                return Err(Error::Budget {
                    what: "full tree leaves (hard limit)".into(),
                    required: leaves,
                    budget: 1 << 26,
                });
            }
        }

        let width = b.sources * marks;
        let mut level_start = vec![0usize, 1];
        let mut counts: Vec<u32> = vec![0; width];
        let mut reach = vec![1.0];
        let mut parent = vec![(NO_PARENT, 0)];
        let mut children: Vec<NodeId> = Vec::new();

        for step in 0..b.steps {
            let (lo, hi) = (level_start[step], level_start[step + 1]);
            let mut index: HashMap<Vec<u32>, NodeId> = HashMap::new();
            let mut next = hi;
            for node in lo..hi {
                let base: Vec<u32> = counts[node * width..(node + 1) * width].to_vec();
                for (br, &p) in branch_probs[step].iter().enumerate() {
                    let mut key = base.clone();
                    if br > 0 {
                        key[br - 1] += 1;
                    }
                    let child = match b.kind {
                        TreeKind::Full => None,
                        TreeKind::Recombining => index.get(&key).copied(),
                    };
                    let child = match child {
                        Some(c) => {
                            reach[c] += reach[node] * p;
                            c
                        }
                        None => {
                            let c = next;
                            next += 1;
                            counts.extend_from_slice(&key);
                            reach.push(reach[node] * p);
                            parent.push((node, br));
                            if b.kind == TreeKind::Recombining {
                                index.insert(key, c);
                            }
                            c
                        }
                    };
                    children.push(child);
                }
            }
            level_start.push(next);
            if b.kind == TreeKind::Recombining {
                if let Some(budget) = b.budget {
                    if next as u128 > budget {
                        return Err(Error::Budget {
                            what: "recombining tree nodes".into(),
                            required: next as u128,
                            budget,
                        });
                    }
                }
            }
        }
        if b.kind == TreeKind::Recombining {
            parent.clear();
        }

        Ok(ScenarioTree {
            kind: b.kind,
            sources: b.sources,
            marks,
            weights,
            grid,
            clock_values,
            d_a,
            branch_probs,
            level_start,
            children,
            reach,
            counts,
            parent,
        })
    }

    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn marks(&self) -> usize {
        self.marks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn branching(&self) -> usize {
        1 + self.sources * self.marks
    }

    /// Depth `M`.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// `A(t_i)` on the grid.
    pub fn clock_values(&self) -> &[f64] {
        &self.clock_values
    }

    /// `ΔA_i = A(t_{i+1}) − A(t_i)`.
    pub fn d_a(&self) -> &[f64] {
        &self.d_a
    }

    /// Branch probabilities at step `i`, indexed by branch.
    pub fn branch_probs(&self, step: usize) -> &[f64] {
        &self.branch_probs[step]
    }

    pub fn node_count(&self) -> usize {
        self.reach.len()
    }

    /// Node ids at grid level `i`.
    pub fn level(&self, i: usize) -> std::ops::Range<NodeId> {
        self.level_start[i]..self.level_start[i + 1]
    }

    pub fn leaves(&self) -> std::ops::Range<NodeId> {
        self.level(self.steps())
    }

    pub fn level_of(&self, node: NodeId) -> usize {
        self.level_start.partition_point(|&s| s <= node) - 1
    }

    pub fn time_of(&self, node: NodeId) -> f64 {
        self.grid[self.level_of(node)]
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        node >= self.level_start[self.steps()]
    }

    /// Children of a non-leaf node, indexed by branch.
    pub fn children(&self, node: NodeId) -> &[NodeId] {
        let b = self.branching();
        &self.children[node * b..(node + 1) * b]
    }

    /// Child reached from `node` when `source` jumps with `mark`.
    pub fn jump_child(&self, node: NodeId, source: usize, mark: usize) -> NodeId {
        self.children(node)[1 + source * self.marks + mark]
    }

    /// Marginal probability of reaching `node`.
    pub fn reach(&self, node: NodeId) -> f64 {
        self.reach[node]
    }

    pub fn reach_all(&self) -> &[f64] {
        &self.reach
    }

    /// Jump counts per mark of `source` up to `node`.
    pub fn counts(&self, node: NodeId, source: usize) -> &[u32] {
        let w = self.sources * self.marks;
        &self.counts[node * w + source * self.marks..node * w + (source + 1) * self.marks]
    }

    /// Parent and branch of a node (full trees only).
    pub fn parent(&self, node: NodeId) -> Option<(NodeId, usize)> {
        match self.parent.get(node) {
            Some(&(p, b)) if p != NO_PARENT => Some((p, b)),
            _ => None,
        }
    }

    /// Root-to-node list of nodes (full trees only).
    pub fn path_to(&self, node: NodeId) -> Vec<NodeId> {
        assert_eq!(self.kind, TreeKind::Full, "path reconstruction needs a full tree");
        let mut path = vec![node];
        let mut cur = node;
        while let Some((p, _)) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Branch sequence leading to `node` (full trees only).
    pub fn branches_to(&self, node: NodeId) -> Vec<usize> {
        assert_eq!(self.kind, TreeKind::Full, "path reconstruction needs a full tree");
        let mut out = Vec::new();
        let mut cur = node;
        while let Some((p, b)) = self.parent(cur) {
            out.push(b);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Follow a branch sequence from the root.
    pub fn follow(&self, branches: &[usize]) -> NodeId {
        branches.iter().fold(0, |node, &b| self.children(node)[b])
    }

    /// Index of the node at `level` carrying the given per-source counts (linear scan).
    pub fn find(&self, level: usize, counts: &[u32]) -> Option<NodeId> {
        let w = self.sources * self.marks;
        self.level(level).find(|&v| &self.counts[v * w..(v + 1) * w] == counts)
    }
}
