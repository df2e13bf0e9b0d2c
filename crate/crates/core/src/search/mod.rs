//! Greedy accuracy-per-efficiency search over subnet configurations.
//!
//! Starting from the max config, every step scores all single-step
//! slimmings of the current config by accuracy drop per unit of MES gain
//! and applies the cheapest, until the objective holds. Exhaustive and
//! random-sampling baselines share the same oracle and cost model.

mod action;
mod baseline;
mod engine;
mod report;

pub use action::{apply, enumerate_actions, Action, SlimPart};
pub use baseline::{best_meeting, brute_force_pareto, dominates, evaluate_all, pareto_front, random_search, BRUTE_FORCE_LIMIT};
pub use engine::{
    evaluate_accuracy, evaluate_subnet, rank, replay, run_search, score_action, score_frontier, top1_hits,
    AccuracyOracle, CachedOracle, CostModel, Metrics, Partition, Point, ScoredAction, SearchObjective,
    SearchOutcome, Step, SupernetOracle,
};
pub use report::Report;
