//! Corpus-level evaluation: per-graph rows, per-variant aggregates and a
//! forward-pass sweep.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{dsatur, welsh_powell};
use crate::error::{Error, Result};
use crate::gnn::{GnnModel, InferenceConfig};
use crate::graph::{conflict_count, harden, ConflictGraph};
use crate::refine::{refine_pipeline, PipelineConfig, Stage};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    Dsatur,
    WelshPowell,
    Inference,
    InferenceSa,
    Heuristic,
    HeuristicSa,
    Full,
    FullSa,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Dsatur,
        Variant::WelshPowell,
        Variant::Inference,
        Variant::InferenceSa,
        Variant::Heuristic,
        Variant::HeuristicSa,
        Variant::Full,
        Variant::FullSa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dsatur => "dsatur",
            Variant::WelshPowell => "welsh_powell",
            Variant::Inference => "inference",
            Variant::InferenceSa => "inference+sa",
            Variant::Heuristic => "heuristic",
            Variant::HeuristicSa => "heuristic+sa",
            Variant::Full => "full",
            Variant::FullSa => "full+sa",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Variant::Dsatur | Variant::WelshPowell)
    }

    /// Last repair stage and whether annealing runs, for model variants.
    fn stages(self) -> Option<(Stage, bool)> {
        match self {
            Variant::Dsatur | Variant::WelshPowell => None,
            Variant::Inference => Some((Stage::Inference, false)),
            Variant::InferenceSa => Some((Stage::Inference, true)),
            Variant::Heuristic => Some((Stage::Heuristic, false)),
            Variant::HeuristicSa => Some((Stage::Heuristic, true)),
            Variant::Full => Some((Stage::Csp, false)),
            Variant::FullSa => Some((Stage::Csp, true)),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant `{s}`; valid variants: {}",
                    names.join(", ")
                ))
            })
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().into()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    /// Stage settings shared by every model variant; `last_stage`,
    /// `sa_enabled` and the seeds are overridden per variant and graph.
    pub pipeline: PipelineConfig,
    /// Pass counts for the sweep; empty disables it.
    pub sweep_passes: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            pipeline: PipelineConfig::default(),
            sweep_passes: vec![1, 2, 5, 10, 20],
            seed: 0,
        }
    }
}

/// Inference seed for graph `index`; the sweep and every variant share it.
pub fn init_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, "solve-init", index as u64)
}

/// Annealing seed for graph `index`.
pub fn sa_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, "solve-sa", index as u64)
}

/// Pipeline settings for graph `index` of a corpus.
pub fn per_graph_config(base: &PipelineConfig, seed: u64, index: usize) -> PipelineConfig {
    let mut cfg = base.clone();
    cfg.inference.init_seed = init_seed(seed, index);
    cfg.sa.seed = sa_seed(seed, index);
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub graph: String,
    pub model: String,
    pub variant: Variant,
    pub nodes: usize,
    pub edges: usize,
    /// Producing stage for model variants; the baseline name otherwise.
    pub stage: String,
    pub conflicts: usize,
    pub max_spread: usize,
    pub uncolorable: bool,
    pub timed_out: bool,
    /// Seconds spent in inference and in refinement.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds: Option<(f64, f64)>,
}

impl BenchRow {
    pub fn solved(&self) -> bool {
        self.conflicts == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub model: String,
    pub variant: Variant,
    pub graphs: usize,
    pub solved: usize,
    pub solve_pct: f64,
    pub mean_max_spread: f64,
    /// Population standard deviation.
    pub std_max_spread: f64,
    pub mean_conflicts: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub passes: usize,
    pub graphs: usize,
    pub solved: usize,
    pub solve_pct: f64,
    pub mean_conflicts: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub aggregates: Vec<Aggregate>,
    pub sweep: Vec<SweepRow>,
}

/// Aggregates over `rows`, grouped by `(model, variant)` in first-seen order.
pub fn aggregate(rows: &[BenchRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, Variant)> = Vec::new();
    for r in rows {
        let key = (r.model.clone(), r.variant);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(model, variant)| {
            let group: Vec<&BenchRow> = rows
                .iter()
                .filter(|r| r.model == model && r.variant == variant)
                .collect();
            let n = group.len() as f64;
            let solved = group.iter().filter(|r| r.solved()).count();
            let mean = group.iter().map(|r| r.max_spread as f64).sum::<f64>() / n;
            let var = group
                .iter()
                .map(|r| (r.max_spread as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            Aggregate {
                model,
                variant,
                graphs: group.len(),
                solved,
                solve_pct: 100.0 * solved as f64 / n,
                mean_max_spread: mean,
                std_max_spread: var.sqrt(),
                mean_conflicts: group.iter().map(|r| r.conflicts as f64).sum::<f64>() / n,
            }
        })
        .collect()
}

fn baseline_row(name: &str, g: &ConflictGraph, v: Variant, timings: bool) -> Result<BenchRow> {
    let t = Instant::now();
    let r = match v {
        Variant::Dsatur => dsatur(g, g.k())?,
        _ => welsh_powell(g, g.k())?,
    };
    let secs = t.elapsed().as_secs_f64();
    Ok(BenchRow {
        graph: name.into(),
        model: String::new(),
        variant: v,
        nodes: g.node_count(),
        edges: g.edge_count(),
        stage: v.name().into(),
        conflicts: r.conflicts_at_k,
        max_spread: r.balance.max_spread,
        uncolorable: false,
        timed_out: false,
        seconds: timings.then_some((0.0, secs)),
    })
}

fn model_rows(
    name: &str,
    index: usize,
    g: &ConflictGraph,
    label: &str,
    model: &GnnModel,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    let base = per_graph_config(&cfg.pipeline, cfg.seed, index);
    let t = Instant::now();
    let probs = model.iterative_inference(g, &base.inference)?;
    let inference = t.elapsed().as_secs_f64();
    let mut rows = Vec::new();
    for &v in &cfg.variants {
        let Some((last_stage, sa_enabled)) = v.stages() else {
            continue;
        };
        let pc = PipelineConfig {
            last_stage,
            sa_enabled,
            ..base.clone()
        };
        let t = Instant::now();
        let (_, report) = refine_pipeline(g, &probs, &pc)?;
        let refine = t.elapsed().as_secs_f64();
        rows.push(BenchRow {
            graph: name.into(),
            model: label.into(),
            variant: v,
            nodes: g.node_count(),
            edges: g.edge_count(),
            stage: report.stage.name().into(),
            conflicts: report.conflicts,
            max_spread: report.max_spread,
            uncolorable: report.uncolorable,
            timed_out: report.timed_out,
            seconds: cfg.pipeline.record_timings.then_some((inference, refine)),
        });
    }
    Ok(rows)
}

/// Evaluates every requested variant on every graph. Baselines run once;
/// model variants run once per model. Graphs are processed in parallel on
/// the current rayon pool; row order is deterministic.
pub fn run_bench(
    graphs: &[(String, ConflictGraph)],
    models: &[(String, &GnnModel)],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    cfg.pipeline.validate()?;
    if cfg.variants.is_empty() {
        return Err(Error::Config("no bench variants selected".into()));
    }
    let wants_model = cfg.variants.iter().any(|v| !v.is_baseline());
    if wants_model && models.is_empty() {
        return Err(Error::Config(
            "model variants requested but no checkpoint given".into(),
        ));
    }
    let per_graph: Vec<Vec<BenchRow>> = graphs
        .par_iter()
        .enumerate()
        .map(|(i, (name, g))| {
            let mut rows = Vec::new();
            for &v in cfg.variants.iter().filter(|v| v.is_baseline()) {
                rows.push(baseline_row(name, g, v, cfg.pipeline.record_timings)?);
            }
            if wants_model {
                for (label, model) in models {
                    rows.extend(model_rows(name, i, g, label, model, cfg)?);
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    // group rows by variant so the table reads one block per variant
    let mut rows: Vec<BenchRow> = per_graph.into_iter().flatten().collect();
    let rank = |r: &BenchRow| {
        let m = models.iter().position(|(l, _)| *l == r.model).unwrap_or(0);
        let v = cfg
            .variants
            .iter()
            .position(|&v| v == r.variant)
            .unwrap_or(0);
        (r.variant.is_baseline() as u8 ^ 1, m, v)
    };
    rows.sort_by_key(rank);
    let aggregates = aggregate(&rows);
    let mut sweep = Vec::new();
    for (label, model) in models {
        for &passes in &cfg.sweep_passes {
            sweep.push(sweep_row(graphs, label, model, passes, cfg.seed)?);
        }
    }
    Ok(BenchReport {
        rows,
        aggregates,
        sweep,
    })
}

/// Inference-only solve rate at a given number of passes.
pub fn sweep_row(
    graphs: &[(String, ConflictGraph)],
    label: &str,
    model: &GnnModel,
    passes: usize,
    seed: u64,
) -> Result<SweepRow> {
    let conflicts: Vec<usize> = graphs
        .par_iter()
        .enumerate()
        .map(|(i, (_, g))| {
            let cfg = InferenceConfig {
                forward_passes: passes,
                init_seed: init_seed(seed, i),
            };
            let p = model.iterative_inference(g, &cfg)?;
            conflict_count(g, &harden(&p))
        })
        .collect::<Result<_>>()?;
    let n = graphs.len().max(1) as f64;
    let solved = conflicts.iter().filter(|&&c| c == 0).count();
    Ok(SweepRow {
        model: label.into(),
        passes,
        graphs: graphs.len(),
        solved,
        solve_pct: 100.0 * solved as f64 / n,
        mean_conflicts: conflicts.iter().sum::<usize>() as f64 / n,
    })
}

impl BenchReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from(
            "graph,model,variant,nodes,edges,stage,conflicts,max_spread,uncolorable,timed_out,inference_s,refine_s\n",
        );
        for r in &self.rows {
            let (a, b) = r
                .seconds
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{a},{b}",
                r.graph,
                r.model,
                r.variant,
                r.nodes,
                r.edges,
                r.stage,
                r.conflicts,
                r.max_spread,
                r.uncolorable,
                r.timed_out
            )
            .unwrap();
        }
        out
    }

    /// One line per `(model, variant)`: solve %, mean and std balance error.
    pub fn table_csv(&self) -> String {
        let mut out = String::from(
            "model,variant,graphs,solved,solve_pct,avg_error,std_error,mean_conflicts\n",
        );
        for a in &self.aggregates {
            writeln!(
                out,
                "{},{},{},{},{:.2},{:.4},{:.4},{:.4}",
                a.model,
                a.variant,
                a.graphs,
                a.solved,
                a.solve_pct,
                a.mean_max_spread,
                a.std_max_spread,
                a.mean_conflicts
            )
            .unwrap();
        }
        out
    }

    /// Whitespace-separated columns, directly plottable.
    pub fn sweep_table(&self) -> String {
        let mut out = String::from("# model passes solved graphs solve_pct mean_conflicts\n");
        for s in &self.sweep {
            let model = if s.model.is_empty() { "-" } else { &s.model };
            writeln!(
                out,
                "{model} {} {} {} {:.2} {:.4}",
                s.passes, s.solved, s.graphs, s.solve_pct, s.mean_conflicts
            )
            .unwrap();
        }
        out
    }
}
