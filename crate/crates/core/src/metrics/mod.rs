//! σ-matched detection F1, Panoptic Quality and run aggregation.

pub mod matching;
pub mod pq;
pub mod report;
pub mod stats;

pub use matching::{
    f1_from_counts, f1_scores, match_detections, match_points, merge_counts, CategoryCounts, CategoryScore, ClassScores,
    DetectionAssignment, EmptyCategory, EvalConfig, MatchRule, Point,
};
pub use pq::{panoptic_quality, InstanceMap, PqCategory, PqScores};
pub use report::{f1_table_csv, run_intervals, write_json, EvalReport, RunIntervals};
pub use stats::{aggregate_runs, RunSummary};
