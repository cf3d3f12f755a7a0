//! Oracle cross-checks on small graphs: exact repair and every solver
//! against exhaustive enumeration.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{brute_force, dsatur, welsh_powell, BruteForceAnswer, BruteForceMode};
use crate::error::Result;
use crate::gnn::GnnModel;
use crate::graph::{conflict_count, ConflictGraph};
use crate::refine::{csp_repair_with, full_pipeline, CspConfig, PipelineConfig};
use crate::rng;

/// Edge set of a graph on at most 8 nodes, one bit per pair `u < v`.
type Code = u32;

fn bit(u: usize, v: usize) -> Code {
    let (a, b) = if u < v { (u, v) } else { (v, u) };
    1 << (b * (b - 1) / 2 + a)
}

fn relabel(code: Code, n: usize, perm: &[usize]) -> Code {
    let mut out = 0;
    for b in 1..n {
        for a in 0..b {
            if code & bit(a, b) != 0 {
                out |= bit(perm[a], perm[b]);
            }
        }
    }
    out
}

/// Smallest code over relabelings that keep nodes sorted by degree.
fn canonical(code: Code, n: usize) -> Code {
    let deg: Vec<usize> = (0..n)
        .map(|v| (0..n).filter(|&u| u != v && code & bit(u, v) != 0).count())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (deg[v], v));
    // positions of each degree class in the target labeling
    let mut best = Code::MAX;
    let mut perm = vec![0; n];
    permute_classes(&order, &deg, 0, &mut perm, &mut vec![false; n], &mut |p| {
        best = best.min(relabel(code, n, p));
    });
    best
}

/// Visits every `perm` mapping the nodes of each degree class onto that
/// class's slots in `order`.
fn permute_classes(
    order: &[usize],
    deg: &[usize],
    slot: usize,
    perm: &mut Vec<usize>,
    used: &mut Vec<bool>,
    visit: &mut impl FnMut(&[usize]),
) {
    if slot == order.len() {
        visit(perm);
        return;
    }
    let d = deg[order[slot]];
    for &v in order {
        if !used[v] && deg[v] == d {
            used[v] = true;
            perm[v] = slot;
            permute_classes(order, deg, slot + 1, perm, used, visit);
            used[v] = false;
        }
    }
}

fn connected(code: Code, n: usize) -> bool {
    if n == 0 {
        return true;
    }
    let mut seen = 1u32;
    let mut stack = vec![0];
    while let Some(v) = stack.pop() {
        for u in 0..n {
            if u != v && seen >> u & 1 == 0 && code & bit(u, v) != 0 {
                seen |= 1 << u;
                stack.push(u);
            }
        }
    }
    seen.count_ones() as usize == n
}

/// Canonical codes of all graphs on `n` nodes up to isomorphism.
fn all_codes(n: usize) -> BTreeSet<Code> {
    let mut level: BTreeSet<Code> = BTreeSet::from([0]);
    for m in 2..=n {
        let mut next = BTreeSet::new();
        let new = m - 1;
        for &code in &level {
            for mask in 0u32..1 << new {
                let mut c = code;
                for u in 0..new {
                    if mask >> u & 1 == 1 {
                        c |= bit(u, new);
                    }
                }
                next.insert(canonical(c, m));
            }
        }
        level = next;
    }
    level
}

fn to_graph(code: Code, n: usize, k: usize) -> ConflictGraph {
    let mut edges = Vec::new();
    for b in 1..n {
        for a in 0..b {
            if code & bit(a, b) != 0 {
                edges.push((a, b));
            }
        }
    }
    ConflictGraph::new(n, k, edges, []).expect("valid enumeration")
}

/// All connected graphs on `n` nodes up to isomorphism, `1 <= n <= 8`.
pub fn connected_graphs(n: usize, k: usize) -> Vec<ConflictGraph> {
    assert!((1..=8).contains(&n), "enumeration supports 1..=8 nodes");
    all_codes(n)
        .into_iter()
        .filter(|&c| connected(c, n))
        .map(|c| to_graph(c, n, k))
        .collect()
}

/// Erdos-Renyi graph with `n` nodes and edge probability `p`.
pub fn random_graph(n: usize, p: f64, k: usize, seed: u64) -> ConflictGraph {
    let mut r = rng::stream(seed, "verify-graph", 0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if r.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    ConflictGraph::new(n, k, edges, []).expect("valid random graph")
}

/// Random graphs for the oracle suite: sizes `1..=max_nodes`, densities
/// spread over `[0.1, 0.9]`.
pub fn random_suite(count: usize, max_nodes: usize, k: usize, seed: u64) -> Vec<ConflictGraph> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, "verify-suite", i as u64);
            let n = r.gen_range(1..=max_nodes);
            let p = r.gen_range(0.1..0.9);
            random_graph(
                n,
                p,
                k,
                rng::derive_seed(seed, "verify-suite-graph", i as u64),
            )
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub graphs: usize,
    pub colorable: usize,
    /// CSP verdicts that disagree with enumeration.
    pub verdict_mismatches: Vec<String>,
    /// Solver outputs with fewer conflicts than the enumerated minimum.
    pub bound_violations: Vec<String>,
    /// Feasible CSP colorings that are not proper.
    pub unsound: Vec<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.verdict_mismatches.is_empty()
            && self.bound_violations.is_empty()
            && self.unsound.is_empty()
    }

    pub fn merge(&mut self, other: OracleReport) {
        self.graphs += other.graphs;
        self.colorable += other.colorable;
        self.verdict_mismatches.extend(other.verdict_mismatches);
        self.bound_violations.extend(other.bound_violations);
        self.unsound.extend(other.unsound);
    }
}

/// Checks every graph: CSP feasibility against enumeration, and the
/// pipeline (if a model is given) and both baselines against the
/// enumerated minimum conflict count.
pub fn oracle_check(
    graphs: &[ConflictGraph],
    label: &str,
    model: Option<&GnnModel>,
    pipeline: &PipelineConfig,
) -> Result<OracleReport> {
    let mut rep = OracleReport::default();
    for (i, g) in graphs.iter().enumerate() {
        let k = g.k();
        let id = format!("{label}#{i} (n={}, m={})", g.node_count(), g.edge_count());
        let BruteForceAnswer::MinConflicts { conflicts: min, .. } =
            brute_force(g, k, BruteForceMode::MinConflicts)?
        else {
            unreachable!("mode selects the answer")
        };
        let colorable = brute_force(g, k, BruteForceMode::Feasibility)?.colorable() == Some(true);
        rep.graphs += 1;
        rep.colorable += colorable as usize;
        let seed_coloring = dsatur(g, k)?;
        let csp = csp_repair_with(
            g,
            &seed_coloring.coloring,
            None,
            &CspConfig {
                node_budget: None,
                ..CspConfig::default()
            },
        )?;
        if csp.is_feasible() != colorable {
            rep.verdict_mismatches.push(format!(
                "{id}: csp says {:?}, enumeration says {colorable}",
                csp.status
            ));
        }
        if let Some(c) = csp.coloring() {
            if conflict_count(g, c)? != 0 {
                rep.unsound.push(id.clone());
            }
        }
        let mut outputs = vec![
            ("dsatur", seed_coloring.conflicts_at_k),
            ("welsh_powell", welsh_powell(g, k)?.conflicts_at_k),
        ];
        if let Some(m) = model {
            let (c, _) = full_pipeline(g, m, pipeline)?;
            outputs.push(("pipeline", conflict_count(g, &c)?));
        }
        for (name, conflicts) in outputs {
            if conflicts < min {
                rep.bound_violations
                    .push(format!("{id}: {name} reports {conflicts} < minimum {min}"));
            }
        }
    }
    Ok(rep)
}
