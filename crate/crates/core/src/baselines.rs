//! Classical greedy colorers and an exhaustive oracle.
//!
//! The greedy algorithms color with as many colors as they like; any node
//! whose chosen color is `>= k` is clamped to the in-range color shared by
//! the fewest colored neighbors. `conflicts_at_k` counts the resulting clashes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    balance_from_counts, balance_stats, conflict_count, BalanceStats, Coloring, ConflictGraph,
};

pub const BRUTE_FORCE_LIMIT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub coloring: Coloring,
    /// Colors the unclamped algorithm asked for.
    pub colors_used: usize,
    pub conflicts_at_k: usize,
    pub balance: BalanceStats,
}

fn finish(g: &ConflictGraph, coloring: Coloring, colors_used: usize) -> Result<BaselineResult> {
    Ok(BaselineResult {
        conflicts_at_k: conflict_count(g, &coloring)?,
        balance: balance_stats(g, &coloring)?,
        coloring,
        colors_used,
    })
}

/// Per-node tally of colored neighbors by color.
struct Tally {
    k: usize,
    counts: Vec<u32>,
}

impl Tally {
    fn new(n: usize, k: usize) -> Self {
        Self {
            k,
            counts: vec![0; n * k],
        }
    }

    fn row(&self, v: usize) -> &[u32] {
        &self.counts[v * self.k..(v + 1) * self.k]
    }

    fn add(&mut self, g: &ConflictGraph, v: usize, c: usize) {
        for &u in g.neighbors(v) {
            self.counts[u * self.k + c] += 1;
        }
    }

    fn saturation(&self, v: usize) -> usize {
        self.row(v).iter().filter(|&&x| x > 0).count()
    }

    /// Smallest color no colored neighbor holds; `k` if all are held.
    fn first_free(&self, v: usize) -> usize {
        self.row(v).iter().position(|&x| x == 0).unwrap_or(self.k)
    }

    /// In-range color held by the fewest colored neighbors, lowest first.
    fn least_conflicting(&self, v: usize) -> usize {
        let row = self.row(v);
        (0..self.k).min_by_key(|&c| (row[c], c)).unwrap_or(0)
    }
}

fn check_k(g: &ConflictGraph, k: usize) -> Result<ConflictGraph> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if k == g.k() {
        Ok(g.clone())
    } else {
        g.with_k(k)
    }
}

/// Saturation-degree-first greedy coloring. Ties go to the higher degree,
/// then the lower index. Anchors are colored first.
pub fn dsatur(g: &ConflictGraph, k: usize) -> Result<BaselineResult> {
    let g = check_k(g, k)?;
    let n = g.node_count();
    let mut color: Vec<Option<usize>> = vec![None; n];
    let mut tally = Tally::new(n, k);
    let mut used = 0;
    for (&v, &c) in g.anchors() {
        color[v] = Some(c);
        tally.add(&g, v, c);
        used = used.max(c + 1);
    }
    loop {
        let pick = (0..n)
            .filter(|&v| color[v].is_none())
            .max_by_key(|&v| (tally.saturation(v), g.degree(v), std::cmp::Reverse(v)));
        let Some(v) = pick else { break };
        let want = tally.first_free(v);
        used = used.max(want + 1);
        let c = if want < k {
            want
        } else {
            tally.least_conflicting(v)
        };
        color[v] = Some(c);
        tally.add(&g, v, c);
    }
    let coloring = Coloring::new(color.into_iter().map(Option::unwrap).collect());
    finish(&g, coloring, used)
}

/// Degree-descending color-class construction. Ties go to the lower index.
pub fn welsh_powell(g: &ConflictGraph, k: usize) -> Result<BaselineResult> {
    let g = check_k(g, k)?;
    let n = g.node_count();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (std::cmp::Reverse(g.degree(v)), v));
    let mut class: Vec<Option<usize>> = vec![None; n];
    for (&v, &c) in g.anchors() {
        class[v] = Some(c);
    }
    let mut remaining = class.iter().filter(|c| c.is_none()).count();
    let mut classes = g.anchors().values().map(|&c| c + 1).max().unwrap_or(0);
    let mut c = 0;
    while remaining > 0 {
        for &v in &order {
            if class[v].is_none() && g.neighbors(v).iter().all(|&u| class[u] != Some(c)) {
                class[v] = Some(c);
                remaining -= 1;
            }
        }
        c += 1;
        classes = classes.max(c);
    }
    // Clamp out-of-range classes in processing order.
    let mut color: Vec<Option<usize>> = class.iter().map(|&c| c.filter(|&c| c < k)).collect();
    let mut tally = Tally::new(n, k);
    for v in 0..n {
        if let Some(c) = color[v] {
            tally.add(&g, v, c);
        }
    }
    let mut spill: Vec<usize> = (0..n).filter(|&v| color[v].is_none()).collect();
    spill.sort_by_key(|&v| (class[v], order.iter().position(|&u| u == v)));
    for v in spill {
        let c = tally.least_conflicting(v);
        color[v] = Some(c);
        tally.add(&g, v, c);
    }
    let coloring = Coloring::new(color.into_iter().map(Option::unwrap).collect());
    finish(&g, coloring, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BruteForceMode {
    Feasibility,
    MinConflicts,
    BestBalanced,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BruteForceAnswer {
    /// A proper coloring if one exists.
    Feasibility(Option<Coloring>),
    MinConflicts {
        conflicts: usize,
        coloring: Coloring,
    },
    /// The proper coloring with the smallest `max_spread` (then squared
    /// deviation), if any.
    BestBalanced(Option<Coloring>),
}

impl BruteForceAnswer {
    pub fn colorable(&self) -> Option<bool> {
        match self {
            BruteForceAnswer::Feasibility(c) | BruteForceAnswer::BestBalanced(c) => {
                Some(c.is_some())
            }
            BruteForceAnswer::MinConflicts { conflicts, .. } => Some(*conflicts == 0),
        }
    }
}

/// Exhaustive search over every anchor-respecting assignment.
pub fn brute_force(g: &ConflictGraph, k: usize, mode: BruteForceMode) -> Result<BruteForceAnswer> {
    let n = g.node_count();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            nodes: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let g = check_k(g, k)?;
    let mut e = Enumerator {
        g: &g,
        k,
        mode,
        color: vec![0; n],
        best: None,
    };
    e.walk(0, 0);
    Ok(match mode {
        BruteForceMode::Feasibility => {
            BruteForceAnswer::Feasibility(e.best.map(|(_, c)| Coloring::new(c)))
        }
        BruteForceMode::BestBalanced => {
            BruteForceAnswer::BestBalanced(e.best.map(|(_, c)| Coloring::new(c)))
        }
        BruteForceMode::MinConflicts => {
            let (score, c) = e.best.expect("at least one assignment");
            BruteForceAnswer::MinConflicts {
                conflicts: score.0,
                coloring: Coloring::new(c),
            }
        }
    })
}

/// Score ordering: conflicts, then spread, then squared deviation scaled to
/// an integer.
type Score = (usize, usize, u64);

struct Enumerator<'a> {
    g: &'a ConflictGraph,
    k: usize,
    mode: BruteForceMode,
    color: Vec<usize>,
    best: Option<(Score, Vec<usize>)>,
}

impl Enumerator<'_> {
    fn done(&self) -> bool {
        match (self.mode, &self.best) {
            (BruteForceMode::Feasibility, Some(_)) => true,
            (BruteForceMode::MinConflicts, Some((s, _))) => s.0 == 0,
            _ => false,
        }
    }

    fn walk(&mut self, v: usize, conflicts: usize) {
        let n = self.color.len();
        if v == n {
            self.leaf(conflicts);
            return;
        }
        let colors: Vec<usize> = match self.g.anchor(v) {
            Some(c) => vec![c],
            None => (0..self.k).collect(),
        };
        for c in colors {
            self.color[v] = c;
            let clash = self
                .g
                .neighbors(v)
                .iter()
                .filter(|&&u| u < v && self.color[u] == c)
                .count();
            let total = conflicts + clash;
            let prune = match (self.mode, &self.best) {
                (BruteForceMode::MinConflicts, Some((s, _))) => total >= s.0,
                (BruteForceMode::MinConflicts, None) => false,
                _ => total > 0,
            };
            if !prune {
                self.walk(v + 1, total);
            }
            if self.done() {
                return;
            }
        }
    }

    fn leaf(&mut self, conflicts: usize) {
        let score = match self.mode {
            BruteForceMode::BestBalanced => {
                let mut counts = vec![0; self.k];
                self.color.iter().for_each(|&c| counts[c] += 1);
                let s = balance_from_counts(&counts);
                // k * squared deviation is an integer
                (
                    conflicts,
                    s.max_spread,
                    (s.squared_deviation * self.k as f64).round() as u64,
                )
            }
            _ => (conflicts, 0, 0),
        };
        if self.best.as_ref().is_none_or(|(b, _)| score < *b) {
            self.best = Some((score, self.color.clone()));
        }
    }
}
