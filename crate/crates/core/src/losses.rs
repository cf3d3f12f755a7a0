//! Soft-assignment objectives and their gradients with respect to the
//! probability matrix.
//!
//! Each kernel takes the `n x k` matrix of per-node color probabilities and,
//! when asked, adds `scale * dL/dP` into a gradient buffer of the same shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConflictGraph, SoftAssignment, DEFAULT_BALANCE_DELTA};
use crate::nn::Matrix;

/// Probabilities below this are treated as this value inside logarithms.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Pairwise,
    Clique,
    Unique,
    BalanceJs,
    BalanceHarsh,
    Entropy,
    Anchor,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Pairwise,
        LossTerm::Clique,
        LossTerm::Unique,
        LossTerm::BalanceJs,
        LossTerm::BalanceHarsh,
        LossTerm::Entropy,
        LossTerm::Anchor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Pairwise => "pairwise",
            LossTerm::Clique => "clique",
            LossTerm::Unique => "unique",
            LossTerm::BalanceJs => "balance_js",
            LossTerm::BalanceHarsh => "balance_harsh",
            LossTerm::Entropy => "entropy",
            LossTerm::Anchor => "anchor",
        }
    }

    /// Balance terms form the secondary objective scaled by beta; every
    /// other term belongs to the colorability objective.
    pub fn is_balance(self) -> bool {
        matches!(self, LossTerm::BalanceJs | LossTerm::BalanceHarsh)
    }
}

/// Per-term weights; a zero weight disables the term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pairwise: f64,
    pub clique: f64,
    pub unique: f64,
    pub balance_js: f64,
    pub balance_harsh: f64,
    pub entropy: f64,
    pub anchor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pairwise: 1.0,
            clique: 0.0,
            unique: 0.0,
            balance_js: 1.0,
            balance_harsh: 0.0,
            entropy: 0.0,
            anchor: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Pairwise => self.pairwise,
            LossTerm::Clique => self.clique,
            LossTerm::Unique => self.unique,
            LossTerm::BalanceJs => self.balance_js,
            LossTerm::BalanceHarsh => self.balance_harsh,
            LossTerm::Entropy => self.entropy,
            LossTerm::Anchor => self.anchor,
        }
    }

    pub fn set(&mut self, term: LossTerm, w: f64) {
        let slot = match term {
            LossTerm::Pairwise => &mut self.pairwise,
            LossTerm::Clique => &mut self.clique,
            LossTerm::Unique => &mut self.unique,
            LossTerm::BalanceJs => &mut self.balance_js,
            LossTerm::BalanceHarsh => &mut self.balance_harsh,
            LossTerm::Entropy => &mut self.entropy,
            LossTerm::Anchor => &mut self.anchor,
        };
        *slot = w;
    }

    pub fn enabled(&self) -> impl Iterator<Item = LossTerm> + '_ {
        LossTerm::ALL.into_iter().filter(|&t| self.get(t) > 0.0)
    }

    /// Only the given terms, each with weight 1.
    pub fn only(terms: &[LossTerm]) -> Self {
        let mut w = Self {
            pairwise: 0.0,
            clique: 0.0,
            unique: 0.0,
            balance_js: 0.0,
            balance_harsh: 0.0,
            entropy: 0.0,
            anchor: 0.0,
        };
        for &t in terms {
            w.set(t, 1.0);
        }
        w
    }
}

/// Controller for the balance coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaConfig {
    pub initial: f64,
    pub decay: f64,
    /// Epochs without a new best colorability loss before beta decays.
    pub patience: usize,
    pub min: f64,
    /// Relative slack: an epoch counts as a regression when its loss exceeds
    /// `best * (1 + tolerance)`.
    pub tolerance: f64,
}

impl Default for BetaConfig {
    fn default() -> Self {
        Self {
            initial: 1.0,
            decay: 0.5,
            patience: 3,
            min: 1e-3,
            tolerance: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Tolerance of the hinge in the harsh balance term, in nodes.
    pub delta_loss: f64,
    pub beta: BetaConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            delta_loss: DEFAULT_BALANCE_DELTA,
            beta: BetaConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if LossTerm::ALL.iter().any(|&t| {
            let w = self.weights.get(t);
            !(w >= 0.0 && w.is_finite())
        }) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !self.weights.enabled().any(|t| !t.is_balance()) {
            return Err(Error::Config(
                "at least one colorability term (pairwise, clique, unique, entropy, anchor) must be enabled".into(),
            ));
        }
        if !(self.delta_loss >= 0.0) {
            return Err(Error::Config("delta_loss must be non-negative".into()));
        }
        let b = &self.beta;
        if !(b.initial >= 0.0
            && b.decay > 0.0
            && b.decay < 1.0
            && b.min >= 0.0
            && b.tolerance >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid beta controller settings {b:?}"
            )));
        }
        Ok(())
    }
}

/// Node sets that are cliques of a graph.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CliqueSet {
    sets: Vec<Vec<usize>>,
}

impl CliqueSet {
    /// Validates that every set is pairwise adjacent in `g`.
    pub fn new(g: &ConflictGraph, sets: Vec<Vec<usize>>) -> Result<Self> {
        for s in &sets {
            for (i, &u) in s.iter().enumerate() {
                for &v in &s[i + 1..] {
                    if !g.has_edge(u, v) {
                        return Err(Error::Contract(format!("{s:?} is not a clique")));
                    }
                }
            }
        }
        Ok(Self { sets })
    }

    /// All triangles `u < v < w`, in lexicographic order.
    pub fn triangles(g: &ConflictGraph) -> Self {
        let mut sets = Vec::new();
        for &(u, v) in g.edges() {
            let (a, b) = (g.neighbors(u), g.neighbors(v));
            let (mut i, mut j) = (0, 0);
            while i < a.len() && j < b.len() {
                match a[i].cmp(&b[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        if a[i] > v {
                            sets.push(vec![u, v, a[i]]);
                        }
                        i += 1;
                        j += 1;
                    }
                }
            }
        }
        sets.sort_unstable();
        Self { sets }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.sets.iter().map(Vec::as_slice)
    }
}

fn accumulate(grad: &mut Option<&mut Matrix>, v: usize, c: usize, x: f64) {
    if let Some(g) = grad.as_deref_mut() {
        g[(v, c)] += x;
    }
}

fn pairwise(g: &ConflictGraph, p: &Matrix, scale: f64, mut grad: Option<&mut Matrix>) -> f64 {
    let mut total = 0.0;
    for &(u, v) in g.edges() {
        let (pu, pv) = (p.row(u), p.row(v));
        total += pu.iter().zip(pv).map(|(a, b)| a * b).sum::<f64>();
        if let Some(gr) = grad.as_deref_mut() {
            for c in 0..p.cols() {
                gr[(u, c)] += scale * pv[c];
                gr[(v, c)] += scale * pu[c];
            }
        }
    }
    total
}

fn clique(cliques: &CliqueSet, p: &Matrix, scale: f64, mut grad: Option<&mut Matrix>) -> f64 {
    let mut total = 0.0;
    for set in cliques.iter() {
        for c in 0..p.cols() {
            total += set.iter().map(|&v| p[(v, c)]).product::<f64>();
            if grad.is_some() {
                for (i, &v) in set.iter().enumerate() {
                    let others: f64 = set
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, &w)| p[(w, c)])
                        .product();
                    accumulate(&mut grad, v, c, scale * others);
                }
            }
        }
    }
    total
}

fn unique(cliques: &CliqueSet, p: &Matrix, scale: f64, mut grad: Option<&mut Matrix>) -> f64 {
    let mut total = 0.0;
    for set in cliques.iter() {
        for c in 0..p.cols() {
            let d = set.iter().map(|&v| p[(v, c)]).sum::<f64>() - 1.0;
            total += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            for &v in set {
                accumulate(&mut grad, v, c, scale * sign);
            }
        }
    }
    total
}

fn color_mass(p: &Matrix) -> Vec<f64> {
    let mut mass = vec![0.0; p.cols()];
    for v in 0..p.rows() {
        for (m, x) in mass.iter_mut().zip(p.row(v)) {
            *m += x;
        }
    }
    mass
}

fn kl_term(a: f64, m: f64) -> f64 {
    if a > 0.0 {
        a * (a / m).ln()
    } else {
        0.0
    }
}

fn balance_js(p: &Matrix, scale: f64, mut grad: Option<&mut Matrix>) -> f64 {
    let (n, k) = p.shape();
    if n == 0 {
        return 0.0;
    }
    let target = 1.0 / k as f64;
    let u: Vec<f64> = color_mass(p).into_iter().map(|x| x / n as f64).collect();
    let mut total = 0.0;
    for (c, &uc) in u.iter().enumerate() {
        let m = 0.5 * (uc + target);
        total += 0.5 * kl_term(uc, m) + 0.5 * kl_term(target, m);
        if grad.is_some() {
            let d = 0.5 * (uc.max(LOG_FLOOR) / m).ln() / n as f64;
            for v in 0..n {
                accumulate(&mut grad, v, c, scale * d);
            }
        }
    }
    total
}

fn balance_harsh(p: &Matrix, delta: f64, scale: f64, mut grad: Option<&mut Matrix>) -> f64 {
    let (n, k) = p.shape();
    let ideal = n as f64 / k as f64;
    let mut total = 0.0;
    for (c, mass) in color_mass(p).into_iter().enumerate() {
        let dev = mass - ideal;
        let h = dev.abs() - delta;
        if h > 0.0 {
            total += h * h;
            let d = 2.0 * h * dev.signum();
            for v in 0..n {
                accumulate(&mut grad, v, c, scale * d);
            }
        }
    }
    total
}

fn entropy(p: &Matrix, scale: f64, mut grad: Option<&mut Matrix>) -> f64 {
    let (n, k) = p.shape();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for v in 0..n {
        for c in 0..k {
            let x = p[(v, c)];
            if x > 0.0 {
                total -= x * x.ln();
            }
            accumulate(
                &mut grad,
                v,
                c,
                -scale * (x.max(LOG_FLOOR).ln() + 1.0) / n as f64,
            );
        }
    }
    total / n as f64
}

fn anchor(g: &ConflictGraph, p: &Matrix, scale: f64, mut grad: Option<&mut Matrix>) -> f64 {
    let count = g.anchors().len();
    if count == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (&v, &c) in g.anchors() {
        let x = p[(v, c)].max(LOG_FLOOR);
        total -= x.ln();
        accumulate(&mut grad, v, c, -scale / (x * count as f64));
    }
    total / count as f64
}

pub fn loss_pairwise(g: &ConflictGraph, s: &SoftAssignment) -> f64 {
    pairwise(g, s.probs(), 0.0, None)
}

pub fn loss_clique(cliques: &CliqueSet, s: &SoftAssignment) -> f64 {
    clique(cliques, s.probs(), 0.0, None)
}

pub fn loss_unique(cliques: &CliqueSet, s: &SoftAssignment) -> f64 {
    unique(cliques, s.probs(), 0.0, None)
}

pub fn loss_balance_js(s: &SoftAssignment) -> f64 {
    balance_js(s.probs(), 0.0, None)
}

pub fn loss_balance_harsh(s: &SoftAssignment, delta_loss: f64) -> f64 {
    balance_harsh(s.probs(), delta_loss, 0.0, None)
}

pub fn loss_entropy(s: &SoftAssignment) -> f64 {
    entropy(s.probs(), 0.0, None)
}

pub fn loss_anchor(g: &ConflictGraph, s: &SoftAssignment) -> f64 {
    anchor(g, s.probs(), 0.0, None)
}

/// Per-graph data the loss kernels need, built once and reused.
#[derive(Clone, Debug)]
pub struct LossContext<'a> {
    pub graph: &'a ConflictGraph,
    pub cliques: CliqueSet,
    pub delta_loss: f64,
}

impl<'a> LossContext<'a> {
    pub fn new(graph: &'a ConflictGraph, delta_loss: f64) -> Self {
        Self {
            graph,
            cliques: CliqueSet::triangles(graph),
            delta_loss,
        }
    }

    /// Unweighted value of `term`; if `grad` is given, `scale * dL/dP` is
    /// added into it.
    pub fn term(&self, term: LossTerm, p: &Matrix, scale: f64, grad: Option<&mut Matrix>) -> f64 {
        match term {
            LossTerm::Pairwise => pairwise(self.graph, p, scale, grad),
            LossTerm::Clique => clique(&self.cliques, p, scale, grad),
            LossTerm::Unique => unique(&self.cliques, p, scale, grad),
            LossTerm::BalanceJs => balance_js(p, scale, grad),
            LossTerm::BalanceHarsh => balance_harsh(p, self.delta_loss, scale, grad),
            LossTerm::Entropy => entropy(p, scale, grad),
            LossTerm::Anchor => anchor(self.graph, p, scale, grad),
        }
    }

    /// Weighted colorability and balance objectives with their gradients.
    pub fn evaluate(&self, weights: &LossWeights, p: &Matrix) -> Evaluation {
        let mut out = Evaluation {
            terms: Vec::new(),
            primary: 0.0,
            secondary: 0.0,
            grad_primary: Matrix::zeros(p.rows(), p.cols()),
            grad_secondary: Matrix::zeros(p.rows(), p.cols()),
        };
        for t in weights.enabled() {
            let w = weights.get(t);
            let (acc, grad) = if t.is_balance() {
                (&mut out.secondary, &mut out.grad_secondary)
            } else {
                (&mut out.primary, &mut out.grad_primary)
            };
            let value = self.term(t, p, w, Some(grad));
            *acc += w * value;
            out.terms.push((t, value));
        }
        out
    }
}

/// Result of [`LossContext::evaluate`]: unweighted per-term values, the
/// weighted colorability objective L1 and balance objective L2, and their
/// gradients with respect to the probability matrix.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub terms: Vec<(LossTerm, f64)>,
    pub primary: f64,
    pub secondary: f64,
    pub grad_primary: Matrix,
    pub grad_secondary: Matrix,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{conflict_count, Coloring};
    use crate::rng;
    use rand::Rng;

    fn soft(rows: &[Vec<f64>]) -> SoftAssignment {
        SoftAssignment::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_soft(n: usize, k: usize, seed: u64) -> SoftAssignment {
        let mut r = rng::stream(seed, "loss-test", 0);
        let mut m = Matrix::zeros(n, k);
        for v in 0..n {
            let row: Vec<f64> = (0..k).map(|_| r.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            for c in 0..k {
                m[(v, c)] = row[c] / s;
            }
        }
        SoftAssignment::new(m).unwrap()
    }

    fn random_graph(n: usize, density: f64, seed: u64) -> ConflictGraph {
        let mut r = rng::stream(seed, "loss-graph", 0);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if r.gen_bool(density) {
                    edges.push((u, v));
                }
            }
        }
        ConflictGraph::new(n, 3, edges, []).unwrap()
    }

    fn triangle() -> ConflictGraph {
        ConflictGraph::new(3, 3, [(0, 1), (1, 2), (0, 2)], []).unwrap()
    }

    #[test]
    fn pairwise_examples() {
        let g = ConflictGraph::new(2, 3, [(0, 1)], []).unwrap();
        assert_eq!(
            loss_pairwise(&g, &soft(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])),
            0.0
        );
        assert_eq!(
            loss_pairwise(&g, &soft(&[vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]])),
            1.0
        );
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let g = random_graph(5, 0.5, 3);
        let s = random_soft(5, 3, 4);
        let mut expect = 0.0;
        for u in 0..5 {
            for v in u + 1..5 {
                if g.has_edge(u, v) {
                    for c in 0..3 {
                        expect += s.row(u)[c] * s.row(v)[c];
                    }
                }
            }
        }
        assert!((loss_pairwise(&g, &s) - expect).abs() < 1e-12);
    }

    #[test]
    fn pairwise_on_one_hot_equals_conflict_count() {
        let g = random_graph(9, 0.4, 5);
        let mut r = rng::stream(5, "c", 0);
        for _ in 0..20 {
            let c = Coloring::new((0..9).map(|_| r.gen_range(0..3)).collect());
            let s = SoftAssignment::one_hot(&c, 3);
            assert_eq!(
                loss_pairwise(&g, &s),
                conflict_count(&g, &c).unwrap() as f64
            );
        }
    }

    #[test]
    fn clique_examples() {
        let g = triangle();
        let cl = CliqueSet::triangles(&g);
        let perm = soft(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert_eq!(loss_clique(&cl, &perm), 0.0);
        let third = 1.0 / 3.0;
        let uni = soft(&[vec![third; 3], vec![third; 3], vec![third; 3]]);
        assert!((loss_clique(&cl, &uni) - 1.0 / 9.0).abs() < 1e-15);
        let s = random_soft(3, 3, 8);
        let expect: f64 = (0..3)
            .map(|c| s.row(0)[c] * s.row(1)[c] * s.row(2)[c])
            .sum();
        assert!((loss_clique(&cl, &s) - expect).abs() < 1e-15);
    }

    #[test]
    fn unique_examples() {
        let g = triangle();
        let cl = CliqueSet::triangles(&g);
        let perm = soft(&[
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ]);
        assert_eq!(loss_unique(&cl, &perm), 0.0);
        let same = soft(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ]);
        assert_eq!(loss_unique(&cl, &same), 4.0);
        let s = random_soft(3, 3, 9);
        let expect: f64 = (0..3)
            .map(|c| (s.row(0)[c] + s.row(1)[c] + s.row(2)[c] - 1.0).abs())
            .sum();
        assert!((loss_unique(&cl, &s) - expect).abs() < 1e-15);
    }

    #[test]
    fn js_examples() {
        let half = soft(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(loss_balance_js(&half).abs() < 1e-15);
        let skew = soft(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(loss_balance_js(&skew).abs() < 1e-15);
        // JS((1,0) || (1/2,1/2)) from its two KL halves, m = (3/4, 1/4).
        let kl_u = 1.0 * (1.0f64 / 0.75).ln();
        let kl_star = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let expect = 0.5 * kl_u + 0.5 * kl_star;
        let all0 = soft(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let got = loss_balance_js(&all0);
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.2158).abs() < 1e-4);
    }

    #[test]
    fn js_is_bounded_by_ln2() {
        for seed in 0..50 {
            let mut r = rng::stream(seed, "js", 0);
            let k = r.gen_range(2..6);
            let n = r.gen_range(1..8);
            let c = Coloring::new(vec![r.gen_range(0..k); n]);
            let v = loss_balance_js(&SoftAssignment::one_hot(&c, k));
            assert!((0.0..=std::f64::consts::LN_2).contains(&v));
            assert!(loss_balance_js(&random_soft(n, k, seed)) >= 0.0);
        }
    }

    #[test]
    fn harsh_examples() {
        let third = 1.0 / 3.0;
        let even = soft(&vec![vec![third; 3]; 6]);
        assert!(loss_balance_harsh(&even, 0.0).abs() < 1e-20);
        let all0 = soft(&vec![vec![1.0, 0.0, 0.0]; 6]);
        assert_eq!(loss_balance_harsh(&all0, 0.0), 24.0);
        let s = random_soft(7, 3, 11);
        let delta = 0.2;
        let mut expect = 0.0;
        for c in 0..3 {
            let mass: f64 = (0..7).map(|v| s.row(v)[c]).sum();
            let h = (mass - 7.0 / 3.0).abs() - delta;
            if h > 0.0 {
                expect += h * h;
            }
        }
        assert!((loss_balance_harsh(&s, delta) - expect).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let c = Coloring::new(vec![0, 2, 1, 1]);
        assert_eq!(loss_entropy(&SoftAssignment::one_hot(&c, 3)), 0.0);
        assert!((loss_entropy(&SoftAssignment::uniform(4, 3)) - 3f64.ln()).abs() < 1e-12);
        let s = random_soft(4, 3, 12);
        let expect: f64 = (0..4)
            .map(|v| -s.row(v).iter().map(|x| x * x.ln()).sum::<f64>())
            .sum::<f64>()
            / 4.0;
        assert!((loss_entropy(&s) - expect).abs() < 1e-12);
    }

    #[test]
    fn anchor_examples() {
        let g = ConflictGraph::new(2, 3, [], [(0, 1)]).unwrap();
        assert_eq!(
            loss_anchor(&g, &soft(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]])),
            0.0
        );
        assert!((loss_anchor(&g, &SoftAssignment::uniform(2, 3)) - 3f64.ln()).abs() < 1e-12);
        let g2 = ConflictGraph::new(2, 3, [], [(0, 0), (1, 2)]).unwrap();
        let s = soft(&[vec![0.5, 0.25, 0.25], vec![0.5, 0.25, 0.25]]);
        let expect = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((loss_anchor(&g2, &s) - expect).abs() < 1e-12);
        let free = ConflictGraph::new(2, 3, [], []).unwrap();
        assert_eq!(loss_anchor(&free, &s), 0.0);
    }

    #[test]
    fn triangles_match_triple_enumeration() {
        for seed in 0..10 {
            let n = 10 + 4 * seed as usize;
            let g = random_graph(n, 0.3, seed);
            let mut expect = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    for c in b + 1..n {
                        if g.has_edge(a, b) && g.has_edge(b, c) && g.has_edge(a, c) {
                            expect.push(vec![a, b, c]);
                        }
                    }
                }
            }
            let got: Vec<Vec<usize>> = CliqueSet::triangles(&g)
                .iter()
                .map(<[usize]>::to_vec)
                .collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn clique_set_rejects_non_cliques() {
        let g = ConflictGraph::new(3, 3, [(0, 1), (1, 2)], []).unwrap();
        assert!(CliqueSet::new(&g, vec![vec![0, 1, 2]]).is_err());
        assert!(CliqueSet::new(&g, vec![vec![0, 1]]).is_ok());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-4;
        for seed in 0..20 {
            let g = random_graph(6, 0.6, seed)
                .with_anchors([(1, 2), (4, 0)])
                .unwrap();
            let ctx = LossContext::new(&g, 0.3);
            let p = random_soft(6, 3, seed + 100).into_matrix();
            for t in LossTerm::ALL {
                let mut grad = Matrix::zeros(6, 3);
                ctx.term(t, &p, 1.0, Some(&mut grad));
                for v in 0..6 {
                    for c in 0..3 {
                        let mut plus = p.clone();
                        plus[(v, c)] += h;
                        let mut minus = p.clone();
                        minus[(v, c)] -= h;
                        let fd = (ctx.term(t, &plus, 0.0, None) - ctx.term(t, &minus, 0.0, None))
                            / (2.0 * h);
                        let a = grad[(v, c)];
                        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                        assert!(rel < 1e-4, "{t:?} seed {seed} ({v},{c}): {a} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn evaluate_splits_objectives_and_weights() {
        let g = random_graph(6, 0.5, 1).with_anchors([(0, 1)]).unwrap();
        let ctx = LossContext::new(&g, 0.5);
        let p = random_soft(6, 3, 2).into_matrix();
        let mut w =
            LossWeights::only(&[LossTerm::Pairwise, LossTerm::Entropy, LossTerm::BalanceJs]);
        w.entropy = 0.5;
        w.balance_js = 2.0;
        let e = ctx.evaluate(&w, &p);
        let s = SoftAssignment::new(p.clone()).unwrap();
        let l1 = loss_pairwise(&g, &s) + 0.5 * loss_entropy(&s);
        let l2 = 2.0 * loss_balance_js(&s);
        assert!((e.primary - l1).abs() < 1e-12);
        assert!((e.secondary - l2).abs() < 1e-12);
        assert_eq!(e.terms.len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let mut c = LossConfig::default();
        c.weights = LossWeights::only(&[LossTerm::BalanceJs]);
        assert!(c.validate().is_err());
        let mut c = LossConfig::default();
        c.weights.pairwise = -1.0;
        assert!(c.validate().is_err());
        let mut c = LossConfig::default();
        c.beta.decay = 1.5;
        assert!(c.validate().is_err());
    }
}
