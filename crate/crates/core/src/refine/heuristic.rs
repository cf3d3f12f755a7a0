//! Ordered greedy repair of a soft assignment.
//!
//! Nodes are colored most-constrained first (fewest safe colors, then the
//! least confident prediction). Each node takes its predicted color when no
//! colored neighbor holds it, otherwise its most probable safe color.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Coloring, ConflictGraph, SoftAssignment};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResortMode {
    /// Re-rank after every assignment that shrinks a neighbor's safe set.
    #[default]
    OnShrink,
    /// Rank once; re-rank the remainder only after a fallback assignment.
    AfterFallback,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicConfig {
    pub resort: ResortMode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeuristicOutcome {
    pub coloring: Coloring,
    /// Nodes that found every color taken and kept their argmax.
    pub forced: Vec<usize>,
    /// Nodes colored with something other than their argmax.
    pub fallbacks: usize,
}

/// Ranking key: fewer safe colors first, then higher uncertainty, then
/// lower index.
#[derive(Clone, Copy, Debug)]
struct Key {
    safe: usize,
    uncertainty: f64,
    node: usize,
}

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.safe
            .cmp(&other.safe)
            .then_with(|| other.uncertainty.total_cmp(&self.uncertainty))
            .then_with(|| self.node.cmp(&other.node))
    }
}

/// Partial coloring plus, per node, how many colored neighbors hold each
/// color. A color is safe for a node when that count is zero.
pub struct RefineState<'a> {
    graph: &'a ConflictGraph,
    probs: &'a SoftAssignment,
    assigned: Vec<Option<usize>>,
    blocked: Vec<u32>,
    safe: Vec<usize>,
    uncertainty: Vec<f64>,
}

impl<'a> RefineState<'a> {
    pub fn new(graph: &'a ConflictGraph, probs: &'a SoftAssignment) -> Result<Self> {
        let (n, k) = (graph.node_count(), graph.k());
        if probs.node_count() != n || probs.k() != k {
            return Err(Error::Contract(format!(
                "probabilities are {}x{}, graph needs {n}x{k}",
                probs.node_count(),
                probs.k()
            )));
        }
        let uncertainty = (0..n)
            .map(|v| 1.0 - probs.row(v).iter().copied().fold(f64::MIN, f64::max))
            .collect();
        Ok(Self {
            graph,
            probs,
            assigned: vec![None; n],
            blocked: vec![0; n * k],
            safe: vec![k; n],
            uncertainty,
        })
    }

    pub fn color_of(&self, v: usize) -> Option<usize> {
        self.assigned[v]
    }

    pub fn is_safe(&self, v: usize, c: usize) -> bool {
        self.blocked[v * self.graph.k() + c] == 0
    }

    pub fn safe_colors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.graph.k()).filter(move |&c| self.is_safe(v, c))
    }

    pub fn safe_count(&self, v: usize) -> usize {
        self.safe[v]
    }

    pub fn uncertainty(&self, v: usize) -> f64 {
        self.uncertainty[v]
    }

    fn key(&self, v: usize) -> Key {
        Key {
            safe: self.safe[v],
            uncertainty: self.uncertainty[v],
            node: v,
        }
    }

    /// Colors `v` and returns the uncolored neighbors whose safe set shrank.
    fn assign(&mut self, v: usize, c: usize) -> Vec<usize> {
        self.assigned[v] = Some(c);
        let k = self.graph.k();
        let mut shrunk = Vec::new();
        for &u in self.graph.neighbors(v) {
            let slot = &mut self.blocked[u * k + c];
            *slot += 1;
            if *slot == 1 {
                self.safe[u] -= 1;
                if self.assigned[u].is_none() {
                    shrunk.push(u);
                }
            }
        }
        shrunk
    }

    /// Color for `v`, whether it is a fallback, and whether no color was safe.
    fn choose(&self, v: usize) -> (usize, bool, bool) {
        let row = self.probs.row(v);
        let top = argmax(row);
        if self.is_safe(v, top) {
            return (top, false, false);
        }
        let best = self
            .safe_colors(v)
            .reduce(|a, b| if row[b] > row[a] { b } else { a });
        match best {
            Some(c) => (c, true, false),
            None => (top, false, true),
        }
    }

    fn into_coloring(self) -> Coloring {
        Coloring::new(
            self.assigned
                .into_iter()
                .map(|c| c.expect("every node colored"))
                .collect(),
        )
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = c;
        }
    }
    best
}

/// Repair with the default configuration.
pub fn gnn_heuristic_refine(g: &ConflictGraph, probs: &SoftAssignment) -> Result<Coloring> {
    Ok(gnn_heuristic_refine_with(g, probs, &HeuristicConfig::default())?.coloring)
}

pub fn gnn_heuristic_refine_with(
    g: &ConflictGraph,
    probs: &SoftAssignment,
    cfg: &HeuristicConfig,
) -> Result<HeuristicOutcome> {
    let mut st = RefineState::new(g, probs)?;
    for (&v, &c) in g.anchors() {
        st.assign(v, c);
    }
    let mut forced = Vec::new();
    let mut fallbacks = 0;
    let mut visit = |st: &mut RefineState, v: usize| -> (Vec<usize>, bool) {
        let (c, fallback, stuck) = st.choose(v);
        if stuck {
            forced.push(v);
        }
        if fallback {
            fallbacks += 1;
        }
        (st.assign(v, c), fallback)
    };
    let free = (0..g.node_count()).filter(|&v| st.color_of(v).is_none());
    match cfg.resort {
        ResortMode::OnShrink => {
            let mut queue: BTreeSet<Key> = free.map(|v| st.key(v)).collect();
            while let Some(key) = queue.pop_first() {
                let (shrunk, _) = visit(&mut st, key.node);
                for u in shrunk {
                    let mut old = st.key(u);
                    old.safe += 1;
                    queue.remove(&old);
                    queue.insert(st.key(u));
                }
            }
        }
        ResortMode::AfterFallback => {
            let mut order: Vec<usize> = free.collect();
            order.sort_by_key(|&v| st.key(v));
            let mut i = 0;
            while i < order.len() {
                let (_, fallback) = visit(&mut st, order[i]);
                i += 1;
                if fallback {
                    order[i..].sort_by_key(|&v| st.key(v));
                }
            }
        }
    }
    forced.sort_unstable();
    Ok(HeuristicOutcome {
        coloring: st.into_coloring(),
        forced,
        fallbacks,
    })
}
