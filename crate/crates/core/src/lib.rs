//! Joint multi-object CAD alignment by iterative render-and-compare.

pub mod align_net;
pub mod cli;
pub mod diff_engine;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod refine;
pub mod sparse_input;
pub mod synthscene;
pub mod training;

pub use error::{Error, Result};
