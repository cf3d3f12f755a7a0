//! Exact repair by backtracking search.
//!
//! Hard constraints are the edges and anchors. Among proper colorings the
//! search prefers the one closest to the seed coloring, using branch and
//! bound with forward checking over bitmask domains.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{balance_from_counts, Coloring, ConflictGraph, SoftAssignment};

/// Largest `k` representable in a domain bitmask.
pub const MAX_K: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deviation {
    /// Number of nodes whose color differs from the seed.
    #[default]
    Count,
    /// Sum of `|x_v - x_v0|` treating colors as integers.
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CspConfig {
    /// Wall-clock cap in seconds.
    pub time_budget: f64,
    /// Cap on visited search nodes. Unlike the clock this is reproducible.
    pub node_budget: Option<u64>,
    pub deviation: Deviation,
    /// Weight of `max_spread` added to the deviation objective. Zero
    /// disables the balance term.
    pub balance_weight: f64,
    /// Look for a `(k+1)`-clique before searching.
    pub clique_precheck: bool,
}

impl Default for CspConfig {
    fn default() -> Self {
        Self {
            time_budget: 10.0,
            node_budget: Some(2_000_000),
            deviation: Deviation::Count,
            balance_weight: 0.0,
            clique_precheck: true,
        }
    }
}

impl CspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.time_budget > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "csp time_budget must be positive, got {}",
                self.time_budget
            )));
        }
        if !(self.balance_weight >= 0.0) || !self.balance_weight.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "csp balance_weight must be finite and non-negative, got {}",
                self.balance_weight
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CspStatus {
    Feasible(Coloring),
    /// The search space was exhausted without a proper coloring.
    Infeasible,
    /// Budget ran out before any proper coloring was found.
    Timeout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CspResult {
    pub status: CspStatus,
    /// Nodes whose color differs from the seed; zero unless feasible.
    pub nodes_changed: usize,
    /// Whether a feasible result is proven closest to the seed.
    pub optimal: bool,
    pub search_nodes: u64,
}

impl CspResult {
    pub fn coloring(&self) -> Option<&Coloring> {
        match &self.status {
            CspStatus::Feasible(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self.status, CspStatus::Feasible(_))
    }
}

/// Repair with the default configuration and a custom time budget.
pub fn csp_repair(
    g: &ConflictGraph,
    initial: &Coloring,
    time_budget: Duration,
) -> Result<CspResult> {
    let cfg = CspConfig {
        time_budget: time_budget.as_secs_f64(),
        ..CspConfig::default()
    };
    csp_repair_with(g, initial, None, &cfg)
}

/// Repair; `probs` orders the values tried after the seed color.
pub fn csp_repair_with(
    g: &ConflictGraph,
    initial: &Coloring,
    probs: Option<&SoftAssignment>,
    cfg: &CspConfig,
) -> Result<CspResult> {
    cfg.validate()?;
    let (n, k) = (g.node_count(), g.k());
    if k > MAX_K {
        return Err(Error::InvalidParameter(format!(
            "csp supports k <= {MAX_K}, got {k}"
        )));
    }
    g.check_coloring(initial)?;
    if let Some(p) = probs {
        if p.node_count() != n || p.k() != k {
            return Err(Error::Contract(format!(
                "probabilities are {}x{}, graph needs {n}x{k}",
                p.node_count(),
                p.k()
            )));
        }
    }
    if cfg.clique_precheck && find_clique(g, k + 1, 100_000).is_some() {
        return Ok(CspResult {
            status: CspStatus::Infeasible,
            nodes_changed: 0,
            optimal: true,
            search_nodes: 0,
        });
    }
    let mut s = Search::new(g, initial, probs, cfg);
    s.run();
    let search_nodes = s.visited;
    let exhausted = !s.stopped;
    Ok(match s.best.take() {
        Some((_, colors)) => {
            let nodes_changed = colors
                .iter()
                .zip(initial.iter())
                .filter(|(a, b)| a != b)
                .count();
            CspResult {
                status: CspStatus::Feasible(Coloring::new(colors)),
                nodes_changed,
                optimal: exhausted,
                search_nodes,
            }
        }
        None if exhausted => CspResult {
            status: CspStatus::Infeasible,
            nodes_changed: 0,
            optimal: true,
            search_nodes,
        },
        None => CspResult {
            status: CspStatus::Timeout,
            nodes_changed: 0,
            optimal: false,
            search_nodes,
        },
    })
}

struct Frame {
    node: usize,
    values: Vec<usize>,
    next: usize,
    trail_mark: usize,
}

struct Search<'a> {
    g: &'a ConflictGraph,
    initial: &'a [usize],
    probs: Option<&'a SoftAssignment>,
    cfg: &'a CspConfig,
    domain: Vec<u64>,
    color: Vec<Option<usize>>,
    counts: Vec<usize>,
    /// `(node, removed bits)` undo log for forward checking.
    trail: Vec<(usize, u64)>,
    cost: f64,
    best: Option<(f64, Vec<usize>)>,
    visited: u64,
    stopped: bool,
    deadline: Instant,
}

impl<'a> Search<'a> {
    fn new(
        g: &'a ConflictGraph,
        initial: &'a Coloring,
        probs: Option<&'a SoftAssignment>,
        cfg: &'a CspConfig,
    ) -> Self {
        let (n, k) = (g.node_count(), g.k());
        let full = if k == 64 { u64::MAX } else { (1u64 << k) - 1 };
        let mut domain = vec![full; n];
        for (&v, &c) in g.anchors() {
            domain[v] = 1 << c;
        }
        let budget = Duration::from_secs_f64(cfg.time_budget.min(1e9));
        Self {
            g,
            initial,
            probs,
            cfg,
            domain,
            color: vec![None; n],
            counts: vec![0; k],
            trail: Vec::new(),
            cost: 0.0,
            best: None,
            visited: 0,
            stopped: false,
            deadline: Instant::now() + budget,
        }
    }

    fn deviation(&self, v: usize, c: usize) -> f64 {
        let c0 = self.initial[v];
        match self.cfg.deviation {
            Deviation::Count => (c != c0) as u8 as f64,
            Deviation::Absolute => c.abs_diff(c0) as f64,
        }
    }

    /// Deviation already paid plus the cheapest completion of every
    /// unassigned node, ignoring the edges between them.
    fn lower_bound(&self) -> f64 {
        let mut lb = self.cost;
        for v in 0..self.color.len() {
            if self.color[v].is_none() {
                let d = self.domain[v];
                lb += bits(d)
                    .map(|c| self.deviation(v, c))
                    .fold(f64::INFINITY, f64::min);
            }
        }
        lb
    }

    fn select(&self) -> Option<usize> {
        let mut best: Option<(u32, std::cmp::Reverse<usize>, usize)> = None;
        for v in 0..self.color.len() {
            if self.color[v].is_some() {
                continue;
            }
            let key = (
                self.domain[v].count_ones(),
                std::cmp::Reverse(self.g.degree(v)),
                v,
            );
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        best.map(|b| b.2)
    }

    fn values(&self, v: usize) -> Vec<usize> {
        let mut vals: Vec<usize> = bits(self.domain[v]).collect();
        let c0 = self.initial[v];
        let row = self.probs.map(|p| p.row(v));
        vals.sort_by(|&a, &b| {
            (b == c0)
                .cmp(&(a == c0))
                .then_with(|| match row {
                    Some(r) => r[b].total_cmp(&r[a]),
                    None => std::cmp::Ordering::Equal,
                })
                .then_with(|| self.deviation(v, a).total_cmp(&self.deviation(v, b)))
                .then(a.cmp(&b))
        });
        vals
    }

    /// Assigns and prunes neighbors; false on a domain wipe-out.
    fn assign(&mut self, v: usize, c: usize) -> bool {
        self.color[v] = Some(c);
        self.counts[c] += 1;
        self.cost += self.deviation(v, c);
        let bit = 1u64 << c;
        let mut ok = true;
        for &u in self.g.neighbors(v) {
            if self.color[u].is_none() && self.domain[u] & bit != 0 {
                self.domain[u] &= !bit;
                self.trail.push((u, bit));
                if self.domain[u] == 0 {
                    ok = false;
                }
            }
        }
        ok
    }

    fn unassign(&mut self, v: usize, mark: usize) {
        let c = self.color[v].take().expect("assigned");
        self.counts[c] -= 1;
        self.cost -= self.deviation(v, c);
        while self.trail.len() > mark {
            let (u, bit) = self.trail.pop().unwrap();
            self.domain[u] |= bit;
        }
    }

    fn total(&self) -> f64 {
        if self.cfg.balance_weight == 0.0 {
            self.cost
        } else {
            self.cost
                + self.cfg.balance_weight * balance_from_counts(&self.counts).max_spread as f64
        }
    }

    fn out_of_budget(&mut self) -> bool {
        self.visited += 1;
        if let Some(cap) = self.cfg.node_budget {
            if self.visited > cap {
                self.stopped = true;
            }
        }
        if self.visited.is_multiple_of(1024) && Instant::now() >= self.deadline {
            self.stopped = true;
        }
        self.stopped
    }

    fn pruned(&self) -> bool {
        match &self.best {
            Some((b, _)) => self.lower_bound() >= *b,
            None => false,
        }
    }

    fn record(&mut self) {
        let total = self.total();
        if self.best.as_ref().is_none_or(|(b, _)| total < *b) {
            let colors = self.color.iter().map(|c| c.unwrap()).collect();
            self.best = Some((total, colors));
        }
    }

    fn open(&mut self) -> Option<Frame> {
        let node = self.select()?;
        Some(Frame {
            node,
            values: self.values(node),
            next: 0,
            trail_mark: 0,
        })
    }

    fn run(&mut self) {
        if self.domain.contains(&0) {
            return;
        }
        let mut stack: Vec<Frame> = Vec::new();
        match self.open() {
            Some(f) => stack.push(f),
            None => {
                self.record();
                return;
            }
        }
        while let Some(top) = stack.last_mut() {
            if top.next > 0 {
                let (node, mark) = (top.node, top.trail_mark);
                self.unassign(node, mark);
            }
            let top = stack.last_mut().unwrap();
            if top.next == top.values.len() {
                stack.pop();
                continue;
            }
            let (node, c) = (top.node, top.values[top.next]);
            top.next += 1;
            top.trail_mark = self.trail.len();
            if self.out_of_budget() {
                return;
            }
            if !self.assign(node, c) || self.pruned() {
                continue;
            }
            match self.open() {
                Some(f) => stack.push(f),
                None => {
                    self.record();
                    if self.best.as_ref().is_some_and(|(b, _)| *b == 0.0) {
                        return;
                    }
                }
            }
        }
    }
}

fn bits(mut d: u64) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        if d == 0 {
            None
        } else {
            let c = d.trailing_zeros() as usize;
            d &= d - 1;
            Some(c)
        }
    })
}

/// Searches for a clique of `size` nodes, visiting at most `steps`
/// candidate extensions. Returns the clique's nodes if found.
pub fn find_clique(g: &ConflictGraph, size: usize, steps: usize) -> Option<Vec<usize>> {
    if size == 0 {
        return Some(Vec::new());
    }
    let mut budget = steps;
    let mut order: Vec<usize> = (0..g.node_count())
        .filter(|&v| g.degree(v) + 1 >= size)
        .collect();
    order.sort_by_key(|&v| (std::cmp::Reverse(g.degree(v)), v));
    let mut clique = Vec::with_capacity(size);
    for &v in &order {
        let cand: Vec<usize> = g
            .neighbors(v)
            .iter()
            .copied()
            .filter(|&u| u > v && g.degree(u) + 1 >= size)
            .collect();
        clique.clear();
        clique.push(v);
        if extend(g, &mut clique, &cand, size, &mut budget) {
            return Some(clique);
        }
        if budget == 0 {
            return None;
        }
    }
    None
}

fn extend(
    g: &ConflictGraph,
    clique: &mut Vec<usize>,
    cand: &[usize],
    size: usize,
    budget: &mut usize,
) -> bool {
    if clique.len() == size {
        return true;
    }
    if clique.len() + cand.len() < size {
        return false;
    }
    for (i, &u) in cand.iter().enumerate() {
        if *budget == 0 {
            return false;
        }
        *budget -= 1;
        let next: Vec<usize> = cand[i + 1..]
            .iter()
            .copied()
            .filter(|&w| g.has_edge(u, w))
            .collect();
        clique.push(u);
        if extend(g, clique, &next, size, budget) {
            return true;
        }
        clique.pop();
    }
    false
}
