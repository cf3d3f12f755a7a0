//! Balance polishing by simulated annealing over conflict-free recolorings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{balance_from_counts, class_counts, conflict_count, Coloring, ConflictGraph};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaConfig {
    /// Proposals to make; `None` means one per node.
    pub iterations: Option<usize>,
    pub initial_temperature: f64,
    /// Geometric factor per proposal; `None` cools to 0.01 at the cap.
    pub cooling: Option<f64>,
    pub seed: u64,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            iterations: None,
            initial_temperature: 1.0,
            cooling: None,
            seed: 0,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_temperature > 0.0) || !self.initial_temperature.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sa initial_temperature must be positive, got {}",
                self.initial_temperature
            )));
        }
        if let Some(f) = self.cooling {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "sa cooling must lie in (0,1), got {f}"
                )));
            }
        }
        Ok(())
    }

    fn schedule(&self, n: usize) -> (usize, f64) {
        let iters = self.iterations.unwrap_or(n);
        let factor = self.cooling.unwrap_or_else(|| {
            if iters == 0 {
                0.5
            } else {
                (0.01f64 / self.initial_temperature)
                    .powf(1.0 / iters as f64)
                    .clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
            }
        });
        (iters, factor)
    }
}

/// `max_spread` plus squared deviation scaled below one unit, so spread
/// dominates and squared deviation breaks ties.
pub fn balance_energy(counts: &[usize]) -> f64 {
    let stats = balance_from_counts(counts);
    let n = counts.iter().sum::<usize>() as f64;
    stats.max_spread as f64 + stats.squared_deviation / (n * n + 1.0)
}

pub fn sa_balance(g: &ConflictGraph, c: &Coloring, cfg: &SaConfig) -> Result<Coloring> {
    cfg.validate()?;
    let conflicts = conflict_count(g, c)?;
    if conflicts > 0 {
        return Err(Error::Precondition(format!(
            "annealing needs a conflict-free coloring, input has {conflicts} conflicts"
        )));
    }
    let (n, k) = (g.node_count(), g.k());
    let movable: Vec<usize> = (0..n).filter(|&v| g.anchor(v).is_none()).collect();
    if movable.is_empty() || k < 2 {
        return Ok(c.clone());
    }
    let (iters, factor) = cfg.schedule(n);
    let mut r = rng::stream(cfg.seed, "anneal", 0);
    let mut cur = c.clone();
    let mut counts = class_counts(&cur, k);
    let mut energy = balance_energy(&counts);
    let mut best = (energy, cur.clone());
    let mut t = cfg.initial_temperature;
    for _ in 0..iters {
        let v = movable[r.gen_range(0..movable.len())];
        let from = cur[v];
        let mut to = r.gen_range(0..k - 1);
        if to >= from {
            to += 1;
        }
        let accept_roll: f64 = r.gen();
        let proper = g.neighbors(v).iter().all(|&u| cur[u] != to);
        if proper {
            counts[from] -= 1;
            counts[to] += 1;
            let next = balance_energy(&counts);
            let delta = next - energy;
            if delta <= 0.0 || accept_roll < (-delta / t).exp() {
                cur[v] = to;
                energy = next;
                if energy < best.0 {
                    best = (energy, cur.clone());
                }
            } else {
                counts[to] -= 1;
                counts[from] += 1;
            }
        }
        t *= factor;
    }
    Ok(best.1)
}
