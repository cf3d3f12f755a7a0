//! Balanced fixed-`k` conflict-graph coloring for multipatterning layout
//! decomposition.
//!
//! A message-passing network proposes soft colorings, which are then
//! repaired (ordered greedy repair, exact backtracking fallback) and
//! balanced by annealing. Classical baselines and an exhaustive oracle are
//! included for comparison and verification.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod instance;
pub mod losses;
pub mod nn;
pub mod refine;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{
    balance_stats, conflict_count, hard_bound_satisfied, harden, total_violations, BalanceStats,
    Coloring, ConflictGraph, SoftAssignment,
};
