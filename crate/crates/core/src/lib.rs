//! Hierarchical in-context segmentation with entropy-guided patch selection.

pub mod baseline;
pub mod cascade;
pub mod cli;
pub mod data;
pub mod error;
pub mod evalcost;
pub mod kv;
pub mod numerics;
pub mod model;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
