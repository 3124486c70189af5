//! The context-aware detector and its refinement head.

pub mod config;
pub mod detector;
pub mod heads;

pub use config::{Integration, ModelConfig};
pub use detector::{anchor_points, assemble_context, ContextBlock, Decoded, Detector, PooledContext, Proposal};
pub use heads::{join_features, PhiPrime};
