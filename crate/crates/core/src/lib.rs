//! Multi-target vehicle tracking for aerial video.

pub mod association;
pub mod config;
pub mod dbt;
pub mod error;
pub mod flow;
pub mod io;
pub mod lct;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod simulator;
pub mod types;

pub use error::{Error, Result};
