//! Node classification with grid-like neighborhood aggregation: offline
//! multi-hop feature propagation, a convolutional extractor over hop-stacked
//! features, adaptive raw/neighborhood fusion with mask training, and a
//! mini-batch training harness.

pub mod dataset;
pub mod error;
pub mod gna;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
