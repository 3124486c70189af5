//! Context-aware nucleus detection over tiled gigapixel slides.

pub mod auxseg;
pub mod cli;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
