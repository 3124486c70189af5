//! Whole-slide inference: the streaming scheduler, its feature cache and
//! cost accounting against baseline modes.

pub mod cache;
pub mod engine;
pub mod output;
pub mod schedule;
pub mod source;

pub use cache::{ContextCache, FullEntry};
pub use engine::{bench, run, run_streaming, run_two_pass, CostReport, Detection, InferenceConfig, Mode, Models};
pub use output::{detections_csv, read_detections_jsonl, write_detections_jsonl};
pub use schedule::{plan_causal_schedule, plan_schedule, Event, Schedule};
pub use source::{ArchiveSource, MemorySource, TileSource};
