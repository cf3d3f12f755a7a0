//! Inference, repair and balancing chained into one solve.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::anneal::{sa_balance, SaConfig};
use super::csp::{csp_repair_with, CspConfig, CspStatus};
use super::heuristic::{gnn_heuristic_refine_with, HeuristicConfig};
use crate::error::Result;
use crate::gnn::{GnnModel, InferenceConfig};
use crate::graph::{
    balance_stats, conflict_count, harden, Coloring, ConflictGraph, SoftAssignment,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Inference,
    Heuristic,
    Csp,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Inference => "inference",
            Stage::Heuristic => "heuristic",
            Stage::Csp => "csp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub inference: InferenceConfig,
    pub heuristic: HeuristicConfig,
    pub csp: CspConfig,
    pub sa: SaConfig,
    pub sa_enabled: bool,
    /// Last repair stage allowed to run.
    pub last_stage: Stage,
    /// Record wall times in the report. Reports with timings are not
    /// byte-reproducible.
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inference: InferenceConfig::default(),
            heuristic: HeuristicConfig::default(),
            csp: CspConfig::default(),
            sa: SaConfig::default(),
            sa_enabled: true,
            last_stage: Stage::Csp,
            record_timings: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.csp.validate()?;
        self.sa.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub conflicts_before: usize,
    pub conflicts_after: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CspReport {
    pub status: String,
    pub conflicts_before: usize,
    pub conflicts_after: usize,
    pub nodes_changed: usize,
    pub optimal: bool,
    pub search_nodes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub inference: f64,
    pub heuristic: f64,
    pub csp: f64,
    pub sa: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.inference + self.heuristic + self.csp + self.sa
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// Stage that produced the final coloring.
    pub stage: Stage,
    pub inference_conflicts: usize,
    pub heuristic: Option<StageCounts>,
    pub csp: Option<CspReport>,
    /// `max_spread` before and after annealing, when it ran.
    pub balance_before_sa: Option<usize>,
    pub balance_after_sa: Option<usize>,
    pub conflicts: usize,
    pub max_spread: usize,
    pub uncolorable: bool,
    pub timed_out: bool,
    /// Seconds per stage.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timings: Option<StageTimings>,
}

impl StageReport {
    pub fn solved(&self) -> bool {
        self.conflicts == 0
    }
}

/// Runs inference with `model`, then [`refine_pipeline`].
pub fn full_pipeline(
    g: &ConflictGraph,
    model: &GnnModel,
    cfg: &PipelineConfig,
) -> Result<(Coloring, StageReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let probs = model.iterative_inference(g, &cfg.inference)?;
    let inference = start.elapsed().as_secs_f64();
    let (c, mut report) = refine_pipeline(g, &probs, cfg)?;
    if let Some(t) = report.timings.as_mut() {
        t.inference = inference;
    }
    Ok((c, report))
}

/// Repair and balance a soft assignment.
pub fn refine_pipeline(
    g: &ConflictGraph,
    probs: &SoftAssignment,
    cfg: &PipelineConfig,
) -> Result<(Coloring, StageReport)> {
    cfg.validate()?;
    let mut timings = StageTimings::default();
    let hard = harden(probs);
    let inference_conflicts = conflict_count(g, &hard)?;
    let mut report = StageReport {
        stage: Stage::Inference,
        inference_conflicts,
        heuristic: None,
        csp: None,
        balance_before_sa: None,
        balance_after_sa: None,
        conflicts: inference_conflicts,
        max_spread: 0,
        uncolorable: false,
        timed_out: false,
        timings: None,
    };
    let mut best = hard;
    let mut conflicts = inference_conflicts;

    if conflicts > 0 && cfg.last_stage >= Stage::Heuristic {
        let t = Instant::now();
        let out = gnn_heuristic_refine_with(g, probs, &cfg.heuristic)?;
        timings.heuristic = t.elapsed().as_secs_f64();
        let after = conflict_count(g, &out.coloring)?;
        report.heuristic = Some(StageCounts {
            conflicts_before: conflicts,
            conflicts_after: after,
        });
        report.stage = Stage::Heuristic;
        if after <= conflicts {
            best = out.coloring;
            conflicts = after;
        }
    }

    if conflicts > 0 && cfg.last_stage >= Stage::Csp {
        let t = Instant::now();
        let res = csp_repair_with(g, &best, Some(probs), &cfg.csp)?;
        timings.csp = t.elapsed().as_secs_f64();
        let status = match &res.status {
            CspStatus::Feasible(_) => "feasible",
            CspStatus::Infeasible => "infeasible",
            CspStatus::Timeout => "timeout",
        };
        report.uncolorable = res.status == CspStatus::Infeasible;
        report.timed_out = res.status == CspStatus::Timeout;
        let before = conflicts;
        if let CspStatus::Feasible(c) = res.status.clone() {
            best = c;
            conflicts = 0;
            report.stage = Stage::Csp;
        }
        report.csp = Some(CspReport {
            status: status.into(),
            conflicts_before: before,
            conflicts_after: conflicts,
            nodes_changed: res.nodes_changed,
            optimal: res.optimal,
            search_nodes: res.search_nodes,
        });
    }

    let spread = balance_stats(g, &best)?.max_spread;
    if conflicts == 0 && cfg.sa_enabled {
        let t = Instant::now();
        best = sa_balance(g, &best, &cfg.sa)?;
        timings.sa = t.elapsed().as_secs_f64();
        report.balance_before_sa = Some(spread);
        report.balance_after_sa = Some(balance_stats(g, &best)?.max_spread);
    }
    report.conflicts = conflicts;
    report.max_spread = balance_stats(g, &best)?.max_spread;
    if cfg.record_timings {
        report.timings = Some(timings);
    }
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::Architecture;
    use crate::instance::generate_planted;

    fn quiet() -> PipelineConfig {
        PipelineConfig {
            record_timings: false,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn k4_is_flagged_with_one_conflict() {
        let g =
            ConflictGraph::new(4, 3, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], []).unwrap();
        let model = GnnModel::new(Architecture::new(3), 1).unwrap();
        let (c, report) = full_pipeline(&g, &model, &quiet()).unwrap();
        assert!(report.uncolorable);
        assert_eq!(report.conflicts, 1);
        assert_eq!(conflict_count(&g, &c).unwrap(), 1);
        assert!(report.balance_after_sa.is_none());
    }

    #[test]
    fn edgeless_graph_is_solved_by_inference() {
        let g = ConflictGraph::new(9, 3, [], []).unwrap();
        let model = GnnModel::new(Architecture::new(3), 1).unwrap();
        let (c, report) = full_pipeline(&g, &model, &quiet()).unwrap();
        assert_eq!(report.stage, Stage::Inference);
        assert_eq!(conflict_count(&g, &c).unwrap(), 0);
        assert!(report.heuristic.is_none() && report.csp.is_none());
    }

    #[test]
    fn untrained_model_still_solves_planted_graphs() {
        let model = GnnModel::new(Architecture::new(3), 4).unwrap();
        for seed in 0..6 {
            let (g, _) = generate_planted(60, 3, 0.3, seed).unwrap();
            let (c, report) = full_pipeline(&g, &model, &quiet()).unwrap();
            assert_eq!(conflict_count(&g, &c).unwrap(), 0);
            assert!(report.solved());
            let sa = (
                report.balance_before_sa.unwrap(),
                report.balance_after_sa.unwrap(),
            );
            assert!(sa.1 <= sa.0);
        }
    }

    #[test]
    fn report_is_deterministic_and_round_trips() {
        let model = GnnModel::new(Architecture::new(3), 4).unwrap();
        let (g, _) = generate_planted(40, 3, 0.3, 11).unwrap();
        let a = full_pipeline(&g, &model, &quiet()).unwrap();
        let b = full_pipeline(&g, &model, &quiet()).unwrap();
        let ja = serde_json::to_string(&a.1).unwrap();
        assert_eq!(ja, serde_json::to_string(&b.1).unwrap());
        assert_eq!(a.0, b.0);
        let back: StageReport = serde_json::from_str(&ja).unwrap();
        assert_eq!(back, a.1);
        assert!(!ja.contains("timings"));
    }

    #[test]
    fn last_stage_limits_the_repair() {
        let g = ConflictGraph::new(3, 3, [(0, 1), (1, 2), (0, 2)], []).unwrap();
        let probs = SoftAssignment::uniform(3, 3);
        let cfg = PipelineConfig {
            last_stage: Stage::Inference,
            ..quiet()
        };
        let (_, r) = refine_pipeline(&g, &probs, &cfg).unwrap();
        assert_eq!(r.conflicts, 3);
        assert_eq!(r.stage, Stage::Inference);
        let (_, r) = refine_pipeline(&g, &probs, &quiet()).unwrap();
        assert_eq!((r.conflicts, r.stage), (0, Stage::Heuristic));
    }
}
