//! Post-inference repair and balancing.

pub mod anneal;
pub mod csp;
pub mod heuristic;
pub mod pipeline;

pub use anneal::{sa_balance, SaConfig};
pub use csp::{csp_repair, csp_repair_with, CspConfig, CspResult, CspStatus, Deviation};
pub use heuristic::{gnn_heuristic_refine, gnn_heuristic_refine_with, HeuristicConfig, ResortMode};
pub use pipeline::{full_pipeline, refine_pipeline, PipelineConfig, Stage, StageReport};
