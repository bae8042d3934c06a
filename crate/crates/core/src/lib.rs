pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod nn;
pub mod projection;
pub mod prompts;
pub mod scoring;
pub mod training;

pub use error::{GsError, Result};
