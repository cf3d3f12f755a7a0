//! Conflict graphs, colorings and the objective metrics the rest of the
//! crate is scored on.
//!
//! Colors are 0-indexed: a `k`-mask instance uses colors `0..k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Default hard-bound tolerance: each class within one node of `N / K`.
pub const DEFAULT_BALANCE_DELTA: f64 = 1.0;

/// Undirected conflict graph with a fixed mask count and optional anchors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConflictGraph {
    node_count: usize,
    k: usize,
    /// Normalized `(u, v)` with `u < v`, sorted, unique.
    edges: Vec<(usize, usize)>,
    anchors: BTreeMap<usize, usize>,
    adjacency: Vec<Vec<usize>>,
}

impl ConflictGraph {
    /// Builds a graph, normalizing edge orientation and dropping duplicates.
    ///
    /// Self-loops, out-of-range endpoints and out-of-range anchor colors are
    /// rejected.
    pub fn new(
        node_count: usize,
        k: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        anchors: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidGraph("k must be positive".into()));
        }
        let mut norm = Vec::new();
        for (u, v) in edges {
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on node {u}")));
            }
            if u >= node_count || v >= node_count {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for {node_count} nodes"
                )));
            }
            norm.push((u.min(v), u.max(v)));
        }
        norm.sort_unstable();
        norm.dedup();

        let mut anchor_map = BTreeMap::new();
        for (node, color) in anchors {
            if node >= node_count {
                return Err(Error::InvalidGraph(format!(
                    "anchor on node {node} out of range for {node_count} nodes"
                )));
            }
            if color >= k {
                return Err(Error::InvalidGraph(format!(
                    "anchor color {color} on node {node} is not below k = {k}"
                )));
            }
            if let Some(prev) = anchor_map.insert(node, color) {
                if prev != color {
                    return Err(Error::InvalidGraph(format!(
                        "node {node} anchored to both {prev} and {color}"
                    )));
                }
            }
        }

        let mut adjacency = vec![Vec::new(); node_count];
        for &(u, v) in &norm {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }

        Ok(Self {
            node_count,
            k,
            edges: norm,
            anchors: anchor_map,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn anchors(&self) -> &BTreeMap<usize, usize> {
        &self.anchors
    }

    pub fn anchor(&self, node: usize) -> Option<usize> {
        self.anchors.get(&node).copied()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.node_count && self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Same graph with a different mask count. Anchors must still fit.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::new(
            self.node_count,
            k,
            self.edges.iter().copied(),
            self.anchors.iter().map(|(&n, &c)| (n, c)),
        )
    }

    pub fn with_anchors(&self, anchors: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::new(self.node_count, self.k, self.edges.iter().copied(), anchors)
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.node_count {
            return Err(Error::Contract("permutation length mismatch".into()));
        }
        Self::new(
            self.node_count,
            self.k,
            self.edges.iter().map(|&(u, v)| (perm[u], perm[v])),
            self.anchors.iter().map(|(&n, &c)| (perm[n], c)),
        )
    }

    pub fn is_connected(&self) -> bool {
        if self.node_count == 0 {
            return true;
        }
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.node_count
    }

    pub(crate) fn check_coloring(&self, c: &Coloring) -> Result<()> {
        if c.len() != self.node_count {
            return Err(Error::Contract(format!(
                "coloring has {} entries, graph has {} nodes",
                c.len(),
                self.node_count
            )));
        }
        if let Some((v, &col)) = c.iter().enumerate().find(|(_, &col)| col >= self.k) {
            return Err(Error::Contract(format!(
                "node {v} has color {col}, not below k = {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Hard assignment of every node to one of `k` colors.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coloring(Vec<usize>);

impl Coloring {
    pub fn new(assignment: Vec<usize>) -> Self {
        Self(assignment)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// Applies `relabel[c]` to every entry.
    pub fn relabeled(&self, relabel: &[usize]) -> Coloring {
        Coloring(self.0.iter().map(|&c| relabel[c]).collect())
    }
}

impl std::ops::Deref for Coloring {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl std::ops::DerefMut for Coloring {
    fn deref_mut(&mut self) -> &mut [usize] {
        &mut self.0
    }
}

impl From<Vec<usize>> for Coloring {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Row-stochastic `node_count x k` matrix of color probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment(Matrix);

impl SoftAssignment {
    pub const ROW_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Matrix) -> Result<Self> {
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Contract(format!(
                    "row {i} has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::Contract(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self(probs))
    }

    /// Wraps without validation; callers guarantee row-stochasticity.
    pub(crate) fn new_unchecked(probs: Matrix) -> Self {
        Self(probs)
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self(Matrix::filled(n, k, 1.0 / k as f64))
    }

    pub fn one_hot(c: &Coloring, k: usize) -> Self {
        let mut m = Matrix::zeros(c.len(), k);
        for (v, &col) in c.iter().enumerate() {
            m[(v, col)] = 1.0;
        }
        Self(m)
    }

    pub fn probs(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn node_count(&self) -> usize {
        self.0.rows()
    }

    pub fn k(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, v: usize) -> &[f64] {
        self.0.row(v)
    }
}

/// Per-color class sizes and the derived balance measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    pub counts: Vec<usize>,
    pub ideal: f64,
    pub squared_deviation: f64,
    /// `max_c n_c - min_c n_c`; the reported balance error.
    pub max_spread: usize,
}

pub fn conflict_count(g: &ConflictGraph, c: &Coloring) -> Result<usize> {
    g.check_coloring(c)?;
    Ok(g.edges.iter().filter(|&&(u, v)| c[u] == c[v]).count())
}

pub fn balance_stats(g: &ConflictGraph, c: &Coloring) -> Result<BalanceStats> {
    g.check_coloring(c)?;
    Ok(balance_from_counts(&class_counts(c, g.k)))
}

pub(crate) fn class_counts(c: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &col in c {
        counts[col] += 1;
    }
    counts
}

pub fn balance_from_counts(counts: &[usize]) -> BalanceStats {
    let n: usize = counts.iter().sum();
    let ideal = n as f64 / counts.len() as f64;
    let squared_deviation = counts.iter().map(|&c| (c as f64 - ideal).powi(2)).sum();
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    BalanceStats {
        counts: counts.to_vec(),
        ideal,
        squared_deviation,
        max_spread: max - min,
    }
}

/// True iff every class is within `delta` of the ideal load.
pub fn hard_bound_satisfied(stats: &BalanceStats, delta: f64) -> bool {
    stats
        .counts
        .iter()
        .all(|&c| (c as f64 - stats.ideal).abs() <= delta)
}

pub fn anchor_violations(g: &ConflictGraph, c: &Coloring) -> usize {
    g.anchors
        .iter()
        .filter(|(&node, &color)| c.get(node) != Some(&color))
        .count()
}

/// Indicator sum over every constraint: one per conflicting edge, one per
/// color class outside the `delta` bound, one per contradicted anchor.
pub fn total_violations(g: &ConflictGraph, c: &Coloring, delta: f64) -> Result<usize> {
    let conflicts = conflict_count(g, c)?;
    let stats = balance_stats(g, c)?;
    let unbalanced = stats
        .counts
        .iter()
        .filter(|&&n| (n as f64 - stats.ideal).abs() > delta)
        .count();
    Ok(conflicts + unbalanced + anchor_violations(g, c))
}

/// Per-node argmax; ties go to the lowest color index.
pub fn harden(s: &SoftAssignment) -> Coloring {
    let p = s.probs();
    Coloring(
        (0..p.rows())
            .map(|v| {
                let row = p.row(v);
                let mut best = 0;
                for (c, &x) in row.iter().enumerate().skip(1) {
                    if x > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect(),
    )
}
